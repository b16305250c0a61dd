//! Self-supervised distillation training: multi-crop augmentation,
//! student/teacher forward passes, centering and sharpening, the
//! distillation loss −Σ qᵢ log pᵢ, the EMA teacher update
//! θ_T ← λθ_T + (1−λ)θ_S, AdamW, and the cosine schedules for
//! learning rate, weight decay, and teacher momentum.
//!
//! Every random choice is drawn from streams derived functionally from
//! `(seed, label, index)`, so a run resumed at step k regenerates the
//! exact continuation of the uninterrupted run.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ingest::resample_bilinear;
use crate::numerics::{softmax, GradTape, Real, Tensor, Var};
use crate::rng::Rng;
use crate::vit::{forward_on_tape, init_params, ModelConfig, VitParams, VitVars};

/// Training hyperparameters and schedule endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DinoConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Peak learning rate after warm-up.
    pub base_lr: f64,
    /// Cosine-decay floor.
    pub final_lr: f64,
    /// Fraction of steps spent in linear warm-up.
    pub warmup_frac: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Warn when mean KL(q ‖ uniform) drops below this floor.
    pub collapse_floor: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            seed: 0,
            total_steps: 300,
            batch_size: 16,
            base_lr: 5e-4,
            final_lr: 1e-6,
            warmup_frac: 0.1,
            wd_start: 0.04,
            wd_end: 0.4,
            lambda_start: 0.996,
            lambda_end: 1.0,
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            collapse_floor: 1e-4,
        }
    }
}

/// Batch sizes the training protocol accepts in strict mode.
pub const STRICT_BATCH_RANGE: (usize, usize) = (16, 32);

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_student <= 0.0 || self.tau_teacher <= 0.0 {
            return Err(Error::config("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum)
            || !(0.0..=1.0).contains(&self.lambda_start)
            || !(0.0..=1.0).contains(&self.lambda_end)
            || !(0.0..=1.0).contains(&self.warmup_frac)
        {
            return Err(Error::config("momenta and fractions must be in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be non-zero"));
        }
        Ok(())
    }

    fn phase(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            0.0
        } else {
            (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64
        }
    }

    fn warmup_steps(&self) -> u64 {
        libm::round(self.warmup_frac * self.total_steps as f64) as u64
    }

    /// Peak learning rate after the reference recipe's linear batch
    /// scaling (`base_lr · batch / 256`). The unscaled 5e-4 is far too
    /// hot for small batches and measurably degrades the encoder.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Linear warm-up to the scaled peak, then cosine decay to
    /// `final_lr`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let peak = self.peak_lr();
        let warmup = self.warmup_steps();
        if warmup > 0 && step < warmup {
            return peak * (step + 1) as f64 / warmup as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        let denom = last.saturating_sub(warmup);
        let phase = if denom == 0 {
            1.0
        } else {
            (step.min(last) - warmup) as f64 / denom as f64
        };
        cosine_between(peak, self.final_lr, phase)
    }

    /// Cosine increase from `wd_start` at step 0 to `wd_end` at the
    /// final step; endpoints are returned exactly.
    pub fn weight_decay(&self, step: u64) -> f64 {
        cosine_between(self.wd_start, self.wd_end, self.phase(step))
    }

    /// Cosine increase of the teacher momentum λ; endpoints exact.
    pub fn lambda(&self, step: u64) -> f64 {
        cosine_between(self.lambda_start, self.lambda_end, self.phase(step))
    }
}

/// Half-cosine interpolation from `start` (phase 0) to `end` (phase 1),
/// exact at both endpoints.
fn cosine_between(start: f64, end: f64, phase: f64) -> f64 {
    if phase <= 0.0 {
        start
    } else if phase >= 1.0 {
        end
    } else {
        end + (start - end) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * phase))
    }
}

// ── Multi-crop augmentation ──────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Area-fraction range for random-resized crops.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// When false, views are deterministic center crops (no draws).
    pub random_crop: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    /// Per-band gain drawn from [1−g, 1+g].
    pub gain_jitter: f64,
    /// Per-band offset drawn from [−o, o].
    pub offset_jitter: f64,
    pub noise_std: f64,
}

impl AugmentSpec {
    /// Desk defaults: 2 global views at the model size, 4 local views
    /// at half resolution. Gain/offset jitter is wide enough to cover
    /// realistic per-tile radiometric spread, so brightness carries no
    /// information about tile identity.
    pub fn desk(image_size: usize) -> Self {
        AugmentSpec {
            n_global: 2,
            n_local: 4,
            global_size: image_size,
            local_size: (image_size / 2).max(1),
            global_scale: (0.5, 1.0),
            local_scale: (0.15, 0.5),
            random_crop: true,
            flip_prob: 0.5,
            rotate: true,
            gain_jitter: 0.35,
            offset_jitter: 1.2,
            noise_std: 0.05,
        }
    }

    /// No-op transforms: global views are the center crop, bit-exact.
    pub fn identity(image_size: usize) -> Self {
        AugmentSpec {
            n_global: 2,
            n_local: 0,
            global_size: image_size,
            local_size: (image_size / 2).max(1),
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            random_crop: false,
            flip_prob: 0.0,
            rotate: false,
            gain_jitter: 0.0,
            offset_jitter: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_global + self.n_local
    }
}

/// Everything needed to recompute a view from its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedView {
    pub view_index: usize,
    pub is_global: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_size: usize,
    pub out_size: usize,
    pub rot_quarters: u8,
    pub flip_h: bool,
    pub gains: Vec<f64>,
    pub offsets: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub raster: Tensor<f32>,
    pub applied: AppliedView,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub seed: u64,
    pub n_global: usize,
    /// Global views first, then local views.
    pub views: Vec<View>,
}

fn rotate_quarters(raster: &Tensor<f32>, k: u8) -> Tensor<f32> {
    if k.is_multiple_of(4) {
        return raster.clone();
    }
    let s = raster.shape();
    let (bands, n) = (s[0], s[1]); // square
    let mut out = Tensor::zeros(s.to_vec());
    for b in 0..bands {
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = match k % 4 {
                    1 => (x, n - 1 - y),         // 90° counter-clockwise source
                    2 => (n - 1 - y, n - 1 - x), // 180°
                    _ => (n - 1 - x, y),         // 270°
                };
                out.data_mut()[b * n * n + y * n + x] = raster.data()[b * n * n + sy * n + sx];
            }
        }
    }
    out
}

fn flip_horizontal(raster: &Tensor<f32>) -> Tensor<f32> {
    let s = raster.shape();
    let (bands, n) = (s[0], s[1]);
    let mut out = Tensor::zeros(s.to_vec());
    for b in 0..bands {
        for y in 0..n {
            for x in 0..n {
                out.data_mut()[b * n * n + y * n + x] =
                    raster.data()[b * n * n + y * n + (n - 1 - x)];
            }
        }
    }
    out
}

fn crop(raster: &Tensor<f32>, y0: usize, x0: usize, side: usize) -> Tensor<f32> {
    let s = raster.shape();
    let (bands, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(bands * side * side);
    for b in 0..bands {
        for y in 0..side {
            let row = b * h * w + (y0 + y) * w + x0;
            data.extend_from_slice(&raster.data()[row..row + side]);
        }
    }
    Tensor::from_vec(alloc::vec![bands, side, side], data).expect("consistent crop shape")
}

/// Deterministic multi-crop augmentation. Views are generated from
/// independent streams derived from `(seed, view index)`; the noise
/// stream is derived separately so recorded parameters plus the seed
/// fully determine every pixel.
pub fn augment(tile: &Tensor<f32>, spec: &AugmentSpec, seed: u64) -> Result<ViewBatch> {
    let s = tile.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [bands, h, w], got {s:?}")));
    }
    let (bands, h, w) = (s[0], s[1], s[2]);
    let min_side = h.min(w);
    if spec.global_size > min_side || spec.local_size > min_side {
        return Err(Error::config(format!(
            "crop sizes ({}, {}) exceed tile side {min_side}",
            spec.global_size, spec.local_size
        )));
    }
    if spec.n_global < 2 {
        return Err(Error::config("at least 2 global views required"));
    }

    let mut views = Vec::with_capacity(spec.n_views());
    for i in 0..spec.n_views() {
        let is_global = i < spec.n_global;
        let out_size = if is_global {
            spec.global_size
        } else {
            spec.local_size
        };
        let scale_range = if is_global {
            spec.global_scale
        } else {
            spec.local_scale
        };
        let mut rng = Rng::derive(seed, "view", i as u64);

        let (crop_size, crop_y, crop_x) = if spec.random_crop {
            let scale = rng.uniform(scale_range.0, scale_range.1);
            let side = libm::round(libm::sqrt(scale) * min_side as f64) as usize;
            let side = side.clamp(1, min_side);
            let y = rng.next_below(h - side + 1);
            let x = rng.next_below(w - side + 1);
            (side, y, x)
        } else {
            (out_size, (h - out_size) / 2, (w - out_size) / 2)
        };
        let rot_quarters = if spec.rotate {
            rng.next_below(4) as u8
        } else {
            0
        };
        let flip_h = spec.flip_prob > 0.0 && rng.next_bool(spec.flip_prob);
        let gains: Vec<f64> = (0..bands)
            .map(|_| {
                if spec.gain_jitter > 0.0 {
                    rng.uniform(1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter)
                } else {
                    1.0
                }
            })
            .collect();
        let offsets: Vec<f64> = (0..bands)
            .map(|_| {
                if spec.offset_jitter > 0.0 {
                    rng.uniform(-spec.offset_jitter, spec.offset_jitter)
                } else {
                    0.0
                }
            })
            .collect();

        let cropped = crop(tile, crop_y, crop_x, crop_size);
        let resized = resample_bilinear(&cropped, out_size, out_size)?;
        let rotated = rotate_quarters(&resized, rot_quarters);
        let mut raster = if flip_h {
            flip_horizontal(&rotated)
        } else {
            rotated
        };

        let per_band = out_size * out_size;
        let mut noise_rng = Rng::derive(seed, "noise", i as u64);
        for b in 0..bands {
            for p in 0..per_band {
                let v = raster.data()[b * per_band + p] as f64;
                let mut v = v * gains[b] + offsets[b];
                if spec.noise_std > 0.0 {
                    v += noise_rng.normal() * spec.noise_std;
                }
                raster.data_mut()[b * per_band + p] = v as f32;
            }
        }
        raster.check_finite("augment")?;

        views.push(View {
            raster,
            applied: AppliedView {
                view_index: i,
                is_global,
                crop_y,
                crop_x,
                crop_size,
                out_size,
                rot_quarters,
                flip_h,
                gains,
                offsets,
                noise_std: spec.noise_std,
            },
        });
    }

    Ok(ViewBatch {
        seed,
        n_global: spec.n_global,
        views,
    })
}

// ── Distillation loss ────────────────────────────────────────────────

/// Teacher distribution and student log-distribution for one
/// (teacher view, student view) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationProbs<T> {
    pub teacher_view: usize,
    pub student_view: usize,
    /// Centered, sharpened, detached teacher distribution.
    pub q: Tensor<T>,
    pub log_p: Tensor<T>,
}

/// Sharpened, centered teacher distribution (detached).
pub fn teacher_distribution<T: Real>(
    teacher_logits: &Tensor<T>,
    center: &Tensor<T>,
    tau_t: f64,
) -> Result<Tensor<T>> {
    if teacher_logits.len() != center.len() {
        return Err(Error::shape(format!(
            "teacher logits len {} vs center len {}",
            teacher_logits.len(),
            center.len()
        )));
    }
    let inv_tau = T::from_f64(1.0 / tau_t);
    let data: Vec<T> = teacher_logits
        .data()
        .iter()
        .zip(center.data())
        .map(|(&t, &c)| (t - c) * inv_tau)
        .collect();
    let centered = Tensor::from_vec(alloc::vec![1, teacher_logits.len()], data)?;
    softmax(&centered, 1)
}

/// Mean cross-entropy over all (teacher global view, student view)
/// pairs with unequal view indices. Teacher logits enter as plain
/// tensors, so no gradient can flow to them.
pub fn dino_loss<T: Real>(
    tape: &mut GradTape<T>,
    student_logits: &[(usize, Var)],
    teacher_logits: &[(usize, Tensor<T>)],
    center: &Tensor<T>,
    tau_s: f64,
    tau_t: f64,
) -> Result<(Var, Vec<DistillationProbs<T>>)> {
    if tau_s <= 0.0 || tau_t <= 0.0 {
        return Err(Error::config(format!(
            "temperatures must be positive, got tau_s={tau_s}, tau_t={tau_t}"
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    let mut probs = Vec::new();
    let inv_tau_s = T::from_f64(1.0 / tau_s);

    for (t_view, t_logits) in teacher_logits {
        let q = teacher_distribution(t_logits, center, tau_t)?;
        for (s_view, s_var) in student_logits {
            if s_view == t_view {
                continue;
            }
            let scaled = tape.scale(*s_var, inv_tau_s)?;
            let log_p = tape.log_softmax_rows(scaled)?;
            let q_leaf = tape.leaf(q.clone());
            let prod = tape.mul(q_leaf, log_p)?;
            let ce = tape.sum(prod)?;
            let ce = tape.scale(ce, -T::ONE)?;
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
            count += 1;
            probs.push(DistillationProbs {
                teacher_view: *t_view,
                student_view: *s_view,
                q: q.clone(),
                log_p: tape.value(log_p).clone(),
            });
        }
    }
    let total = total.ok_or_else(|| {
        Error::invalid("no (teacher, student) view pairs with unequal indices")
    })?;
    let loss = tape.scale(total, T::ONE / T::from_f64(count as f64))?;
    Ok((loss, probs))
}

/// Mean KL(q ‖ uniform) = ln N − H(q); near zero means the teacher
/// distributions have collapsed to uniform.
pub fn collapse_metric<T: Real>(qs: &[&Tensor<T>]) -> Result<f64> {
    if qs.is_empty() {
        return Err(Error::invalid("collapse metric over zero distributions"));
    }
    let mut acc = 0.0f64;
    for q in qs {
        let n = q.len() as f64;
        let h = crate::numerics::entropy(*q)?.to_f64();
        acc += libm::log(n) - h;
    }
    Ok(acc / qs.len() as f64)
}

// ── Teacher and center updates ───────────────────────────────────────

/// θ_T ← λθ_T + (1−λ)θ_S over every parameter tensor, projection head
/// included. λ = 1 and λ = 0 are exact fixed-point/copy cases.
pub fn ema_update<T: Real>(
    teacher: &mut VitParams<T>,
    student: &VitParams<T>,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if teacher.config != student.config {
        return Err(Error::shape("teacher/student configs differ"));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    let student_tensors = student.tensors();
    let mut teacher_tensors = teacher.tensors_mut();
    if teacher_tensors.len() != student_tensors.len() {
        return Err(Error::shape("teacher/student parameter trees differ"));
    }
    let lam = T::from_f64(lambda);
    let one_minus = T::from_f64(1.0 - lambda);
    for (t, s) in teacher_tensors.iter_mut().zip(student_tensors) {
        if t.shape() != s.shape() {
            return Err(Error::shape(format!(
                "parameter shape {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        if lambda == 0.0 {
            **t = s.clone();
        } else {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = lam * *tv + one_minus * sv;
            }
        }
    }
    Ok(())
}

/// c ← m·c + (1−m)·mean(teacher logits over the batch).
pub fn update_center<T: Real>(
    center: &mut Tensor<T>,
    teacher_logits: &[&Tensor<T>],
    momentum: f64,
) -> Result<()> {
    if teacher_logits.is_empty() {
        return Err(Error::invalid("center update over an empty batch"));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config(format!("momentum {momentum} outside [0, 1]")));
    }
    let n = center.len();
    let mut mean = alloc::vec![T::ZERO; n];
    for logits in teacher_logits {
        if logits.len() != n {
            return Err(Error::shape(format!(
                "teacher logits len {} vs center len {n}",
                logits.len()
            )));
        }
        for (m, &v) in mean.iter_mut().zip(logits.data()) {
            *m += v;
        }
    }
    let inv = T::ONE / T::from_f64(teacher_logits.len() as f64);
    let m = T::from_f64(momentum);
    let one_minus = T::from_f64(1.0 - momentum);
    for (c, batch_mean) in center.data_mut().iter_mut().zip(mean) {
        *c = m * *c + one_minus * (batch_mean * inv);
    }
    center.check_finite("update_center")
}

// ── AdamW ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamMoments<T> {
    pub fn zeros_like(params: &VitParams<T>) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect::<Vec<_>>();
        AdamMoments { m: m.clone(), v: m }
    }
}

/// One decoupled-weight-decay Adam step. Weight decay applies to
/// matrix-shaped parameters only (biases and norm parameters are
/// rank 1 and skipped), matching the reference training recipe.
pub fn adamw_step<T: Real>(
    params: &mut VitParams<T>,
    grads: &[Tensor<T>],
    moments: &mut AdamMoments<T>,
    step_one_based: u64,
    lr: f64,
    wd: f64,
    cfg: &DinoConfig,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || moments.m.len() != tensors.len() {
        return Err(Error::shape(format!(
            "{} gradients / {} moment slots for {} parameters",
            grads.len(),
            moments.m.len(),
            tensors.len()
        )));
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_minus_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_minus_b2 = T::from_f64(1.0 - cfg.beta2);
    let bias1 = 1.0 - libm::pow(cfg.beta1, step_one_based as f64);
    let bias2 = 1.0 - libm::pow(cfg.beta2, step_one_based as f64);
    let inv_bias1 = T::from_f64(1.0 / bias1);
    let inv_bias2 = T::from_f64(1.0 / bias2);
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.adam_eps);

    for (i, theta) in tensors.into_iter().enumerate() {
        if grads[i].shape() != theta.shape() {
            return Err(Error::shape(format!(
                "gradient {i} shape {:?} vs parameter {:?}",
                grads[i].shape(),
                theta.shape()
            )));
        }
        let decay = if theta.rank() >= 2 {
            T::from_f64(lr * wd)
        } else {
            T::ZERO
        };
        let m = moments.m[i].data_mut();
        let v = moments.v[i].data_mut();
        for ((p, &g), (m, v)) in theta
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * g * g;
            let mhat = *m * inv_bias1;
            let vhat = *v * inv_bias2;
            *p = *p - lr_t * (mhat / (vhat.sqrt() + eps)) - decay * *p;
        }
    }
    Ok(())
}

// ── Training state and step ──────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DinoState {
    pub config: DinoConfig,
    pub student: VitParams<f32>,
    pub teacher: VitParams<f32>,
    /// Running center over teacher logits, length `proto_count`.
    pub center: Tensor<f32>,
    pub moments: AdamMoments<f32>,
    pub step: u64,
}

impl DinoState {
    /// Teacher starts as an exact copy of the student; the optimizer
    /// never touches it afterwards.
    pub fn init(model: &ModelConfig, config: DinoConfig) -> Result<Self> {
        config.validate()?;
        let student: VitParams<f32> = init_params(model, config.seed)?;
        let teacher = student.clone();
        let center = Tensor::zeros(alloc::vec![model.proto_count]);
        let moments = AdamMoments::zeros_like(&student);
        Ok(DinoState {
            config,
            student,
            teacher,
            center,
            moments,
            step: 0,
        })
    }
}

/// Per-tile forward/backward results, ready for deterministic
/// reduction.
#[derive(Debug, Clone)]
pub struct TileStepTerms {
    pub loss: f64,
    /// Gradients in parameter order, averaged over view pairs.
    pub grads: Vec<Tensor<f32>>,
    /// Raw teacher logits of the global views (for the center update).
    pub teacher_logits: Vec<Tensor<f32>>,
    /// Sum of KL(q ‖ uniform) over pairs, plus the pair count.
    pub collapse_sum: f64,
    pub n_pairs: usize,
}

/// Augments one tile, runs teacher and student forwards, and
/// backpropagates the distillation loss. Pure: identical inputs give
/// identical outputs, so callers may evaluate tiles concurrently and
/// reduce in index order.
pub fn tile_step_terms(
    student: &VitParams<f32>,
    teacher: &VitParams<f32>,
    center: &Tensor<f32>,
    config: &DinoConfig,
    spec: &AugmentSpec,
    raster: &Tensor<f32>,
    view_seed: u64,
) -> Result<TileStepTerms> {
    let batch = augment(raster, spec, view_seed)?;

    // teacher consumes only the global views, without gradients
    let mut teacher_logits = Vec::with_capacity(batch.n_global);
    for (i, view) in batch.views.iter().take(batch.n_global).enumerate() {
        let mut tape = GradTape::new();
        let tile_var = tape.leaf(view.raster.clone());
        let vars = VitVars::place(teacher, &mut tape);
        let fwd = forward_on_tape(teacher, &vars, &mut tape, tile_var)?;
        teacher_logits.push((i, tape.value(fwd.logits).clone()));
    }

    // student consumes every view on one tape
    let mut tape = GradTape::new();
    let student_vars = VitVars::place(student, &mut tape);
    let mut student_logits = Vec::with_capacity(batch.views.len());
    for (i, view) in batch.views.iter().enumerate() {
        let tile_var = tape.leaf(view.raster.clone());
        let fwd = forward_on_tape(student, &student_vars, &mut tape, tile_var)?;
        student_logits.push((i, fwd.logits));
    }

    let (loss_var, probs) = dino_loss(
        &mut tape,
        &student_logits,
        &teacher_logits,
        center,
        config.tau_student,
        config.tau_teacher,
    )?;
    let loss = tape.scalar_value(loss_var)? as f64;
    let grads = tape.backward(loss_var)?;
    let grad_tensors: Vec<Tensor<f32>> = student_vars
        .all
        .iter()
        .map(|&v| grads.wrt(v))
        .collect();

    let qs: Vec<&Tensor<f32>> = probs.iter().map(|p| &p.q).collect();
    let collapse_sum = collapse_metric(&qs)? * qs.len() as f64;

    Ok(TileStepTerms {
        loss,
        grads: grad_tensors,
        teacher_logits: teacher_logits.into_iter().map(|(_, t)| t).collect(),
        collapse_sum,
        n_pairs: qs.len(),
    })
}

/// Per-step scalars for the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub lambda: f64,
    pub collapse_metric: f64,
}

/// Derives the augmentation seed for a tile within a step.
pub fn view_seed(config_seed: u64, step: u64, tile_index: usize) -> u64 {
    config_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(step.wrapping_mul(1 << 20))
        .wrapping_add(tile_index as u64)
}

/// Reduces per-tile terms (in index order) and applies the optimizer,
/// EMA, and center updates.
pub fn apply_step(state: &mut DinoState, terms: &[TileStepTerms]) -> Result<StepStats> {
    if terms.is_empty() {
        return Err(Error::invalid("training step over an empty batch"));
    }
    let step = state.step;
    let inv_b = 1.0f32 / terms.len() as f32;

    let mut mean_grads = terms[0].grads.clone();
    for t in &terms[1..] {
        if t.grads.len() != mean_grads.len() {
            return Err(Error::shape("gradient trees differ across tiles"));
        }
        for (acc, g) in mean_grads.iter_mut().zip(&t.grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in mean_grads.iter_mut() {
        for a in g.data_mut() {
            *a *= inv_b;
        }
    }

    let loss = terms.iter().map(|t| t.loss).sum::<f64>() / terms.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numerical(
            format!("step {step}"),
            format!("non-finite loss {loss}"),
        ));
    }

    let lr = state.config.learning_rate(step);
    let wd = state.config.weight_decay(step);
    let lambda = state.config.lambda(step);
    let config = state.config.clone();
    adamw_step(
        &mut state.student,
        &mean_grads,
        &mut state.moments,
        step + 1,
        lr,
        wd,
        &config,
    )?;
    ema_update(&mut state.teacher, &state.student, lambda)?;

    let all_logits: Vec<&Tensor<f32>> = terms
        .iter()
        .flat_map(|t| t.teacher_logits.iter())
        .collect();
    update_center(&mut state.center, &all_logits, config.center_momentum)?;

    let n_pairs: usize = terms.iter().map(|t| t.n_pairs).sum();
    let collapse = terms.iter().map(|t| t.collapse_sum).sum::<f64>() / n_pairs as f64;

    state.step += 1;
    Ok(StepStats {
        step,
        loss,
        lr,
        wd,
        lambda,
        collapse_metric: collapse,
    })
}

/// One full training step over a batch of tile rasters.
pub fn train_step(
    state: &mut DinoState,
    rasters: &[Tensor<f32>],
    spec: &AugmentSpec,
) -> Result<StepStats> {
    if rasters.is_empty() {
        return Err(Error::invalid("training step over an empty batch"));
    }
    let mut terms = Vec::with_capacity(rasters.len());
    for (i, raster) in rasters.iter().enumerate() {
        terms.push(tile_step_terms(
            &state.student,
            &state.teacher,
            &state.center,
            &state.config,
            spec,
            raster,
            view_seed(state.config.seed, state.step, i),
        )?);
    }
    apply_step(state, &terms)
}
