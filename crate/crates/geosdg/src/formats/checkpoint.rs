//! The GSDG checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "GSDG"
//! version      u16      1
//! model config: image u32, bands u16, patch u32, depth u16,
//!               dim u32, heads u16, proto u32
//! record_count u32
//! records      name_len u16, name bytes, rank u8,
//!              extents u32 × rank, raw f32 data
//! ```
//!
//! Record order is fixed: the student parameters in named order. A
//! trainer checkpoint appends `teacher/<name>` for every parameter,
//! then `opt_m/<name>`, `opt_v/<name>`, `center`, and `trainer/step`.
//! Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use geosdg_core::dino::AdamMoments;
use geosdg_core::numerics::Tensor;
use geosdg_core::vit::{zero_params, ModelConfig, VitParams};

use crate::errors::{CmdError, CmdResult};
use crate::write_atomic;

pub const CKPT_MAGIC: &[u8; 4] = b"GSDG";
pub const CKPT_VERSION: u16 = 1;

/// Optimizer and distillation state stored alongside the student.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub teacher: VitParams<f32>,
    pub moments: AdamMoments<f32>,
    pub center: Tensor<f32>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub student: VitParams<f32>,
    pub trainer: Option<TrainerState>,
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let c = &ckpt.config;
    let student_named = ckpt.student.named();
    let n_params = student_named.len();
    let record_count = match &ckpt.trainer {
        None => n_params,
        Some(_) => 4 * n_params + 2, // student, teacher, m, v, center, step
    };

    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.image_size as u32).to_le_bytes());
    out.extend_from_slice(&(c.bands as u16).to_le_bytes());
    out.extend_from_slice(&(c.patch_size as u32).to_le_bytes());
    out.extend_from_slice(&(c.depth as u16).to_le_bytes());
    out.extend_from_slice(&(c.dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.heads as u16).to_le_bytes());
    out.extend_from_slice(&(c.proto_count as u32).to_le_bytes());
    out.extend_from_slice(&(record_count as u32).to_le_bytes());

    for (name, t) in &student_named {
        push_record(&mut out, name, t);
    }
    if let Some(tr) = &ckpt.trainer {
        for (name, t) in tr.teacher.named() {
            push_record(&mut out, &format!("teacher/{name}"), t);
        }
        for (i, (name, _)) in student_named.iter().enumerate() {
            push_record(&mut out, &format!("opt_m/{name}"), &tr.moments.m[i]);
        }
        for (i, (name, _)) in student_named.iter().enumerate() {
            push_record(&mut out, &format!("opt_v/{name}"), &tr.moments.v[i]);
        }
        push_record(&mut out, "center", &tr.center);
        push_record(&mut out, "trainer/step", &Tensor::scalar(tr.step as f32));
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CmdResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CmdError::format(
                self.path,
                format!("truncated at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> CmdResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> CmdResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CmdResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn record(&mut self) -> CmdResult<(String, Tensor<f32>)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| CmdError::format(self.path, "record name is not UTF-8"))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
            .map(|t| (name, t))
            .map_err(|e| CmdError::format(self.path, e.to_string()))
    }
}

/// Fills a parameter tree from a record iterator, enforcing the fixed
/// name order and exact shapes.
fn read_params(
    r: &mut Reader,
    config: &ModelConfig,
    prefix: &str,
) -> CmdResult<VitParams<f32>> {
    let mut params = zero_params::<f32>(config).map_err(CmdError::from)?;
    let expected: Vec<String> = params
        .named()
        .iter()
        .map(|(n, _)| format!("{prefix}{n}"))
        .collect();
    for (slot, want) in params.tensors_mut().into_iter().zip(&expected) {
        let (name, tensor) = r.record()?;
        if &name != want {
            return Err(CmdError::format(
                r.path,
                format!("expected record '{want}', found '{name}'"),
            ));
        }
        if tensor.shape() != slot.shape() {
            return Err(CmdError::format(
                r.path,
                format!(
                    "record '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = tensor;
    }
    Ok(params)
}

pub fn decode_checkpoint(path: &Path, buf: &[u8]) -> CmdResult<Checkpoint> {
    let mut r = Reader { buf, pos: 0, path };
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(CmdError::format(
            path,
            format!("bad magic {magic:?}, expected \"GSDG\""),
        ));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(CmdError::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let config = ModelConfig {
        image_size: r.u32()? as usize,
        bands: r.u16()? as usize,
        patch_size: r.u32()? as usize,
        depth: r.u16()? as usize,
        dim: r.u32()? as usize,
        heads: r.u16()? as usize,
        proto_count: r.u32()? as usize,
    };
    config
        .validate()
        .map_err(|e| CmdError::format(path, e.to_string()))?;
    let record_count = r.u32()? as usize;

    let student = read_params(&mut r, &config, "")?;
    let n_params = student.named().len();

    let trainer = if record_count == n_params {
        None
    } else if record_count == 4 * n_params + 2 {
        let teacher = read_params(&mut r, &config, "teacher/")?;
        let mut moments = AdamMoments::zeros_like(&student);
        for (i, (name, _)) in student.named().iter().enumerate() {
            let (got, tensor) = r.record()?;
            let want = format!("opt_m/{name}");
            if got != want {
                return Err(CmdError::format(path, format!("expected '{want}', found '{got}'")));
            }
            moments.m[i] = tensor;
        }
        for (i, (name, _)) in student.named().iter().enumerate() {
            let (got, tensor) = r.record()?;
            let want = format!("opt_v/{name}");
            if got != want {
                return Err(CmdError::format(path, format!("expected '{want}', found '{got}'")));
            }
            moments.v[i] = tensor;
        }
        let (name, center) = r.record()?;
        if name != "center" {
            return Err(CmdError::format(path, format!("expected 'center', found '{name}'")));
        }
        let (name, step) = r.record()?;
        if name != "trainer/step" {
            return Err(CmdError::format(
                path,
                format!("expected 'trainer/step', found '{name}'"),
            ));
        }
        Some(TrainerState {
            teacher,
            moments,
            center,
            step: step.at(0) as u64,
        })
    } else {
        return Err(CmdError::format(
            path,
            format!("unexpected record count {record_count} for {n_params} parameters"),
        ));
    };

    if r.pos != buf.len() {
        return Err(CmdError::format(
            path,
            format!("{} trailing bytes", buf.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        config,
        student,
        trainer,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> CmdResult<()> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    let buf = fs::read(path).map_err(|e| CmdError::io(path, e))?;
    decode_checkpoint(path, &buf)
}
