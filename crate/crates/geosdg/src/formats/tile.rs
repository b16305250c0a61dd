//! The GTIL tile container: a bit-exact local raster format standing
//! in for cloud-hosted imagery.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic   4 bytes  "GTIL"
//! version u16      1
//! bands   u16
//! height  u32
//! width   u32
//! dtype   u8       0 = float32
//! lat     f64
//! lon     f64
//! source  u8       0 = landsat8, 1 = sentinel2
//! datelen u16      followed by that many UTF-8 bytes (ISO-8601)
//! cloud   f32      percent
//! raster  bands*height*width f32, band-major row-major
//! ```
//!
//! The tile id is not stored; it comes from the manifest (or the file
//! stem when loading a bare file).

use std::fs;
use std::path::Path;

use geosdg_core::ingest::{Source, Tile};
use geosdg_core::numerics::Tensor;

use crate::errors::{CmdError, CmdResult};
use crate::write_atomic;

pub const TILE_MAGIC: &[u8; 4] = b"GTIL";
pub const TILE_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Header size in bytes for a given date-string length.
pub fn header_len(date_len: usize) -> usize {
    4 + 2 + 2 + 4 + 4 + 1 + 8 + 8 + 1 + 2 + date_len + 4
}

pub fn encode_tile(tile: &Tile) -> CmdResult<Vec<u8>> {
    tile.validate().map_err(|e| CmdError::Ingest(e.to_string()))?;
    let shape = tile.raster.shape();
    let (bands, h, w) = (shape[0], shape[1], shape[2]);
    if bands > u16::MAX as usize || tile.date.len() > u16::MAX as usize {
        return Err(CmdError::ingest("tile metadata exceeds format limits"));
    }
    let mut out = Vec::with_capacity(header_len(tile.date.len()) + tile.raster.len() * 4);
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&TILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(bands as u16).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&tile.lat.to_le_bytes());
    out.extend_from_slice(&tile.lon.to_le_bytes());
    out.push(tile.source.code());
    out.extend_from_slice(&(tile.date.len() as u16).to_le_bytes());
    out.extend_from_slice(tile.date.as_bytes());
    out.extend_from_slice(&tile.cloud_cover.to_le_bytes());
    for &v in tile.raster.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
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
                format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
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

    fn f32(&mut self) -> CmdResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> CmdResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tile(path: &Path, buf: &[u8], tile_id: String) -> CmdResult<Tile> {
    let mut r = Reader { buf, pos: 0, path };
    let magic = r.take(4)?;
    if magic != TILE_MAGIC {
        return Err(CmdError::format(
            path,
            format!("bad magic {magic:?}, expected \"GTIL\""),
        ));
    }
    let version = r.u16()?;
    if version != TILE_VERSION {
        return Err(CmdError::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let bands = r.u16()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(CmdError::format(path, format!("unknown dtype code {dtype}")));
    }
    let lat = r.f64()?;
    let lon = r.f64()?;
    let source = Source::from_code(r.u8()?)
        .map_err(|e| CmdError::format(path, e.to_string()))?;
    let date_len = r.u16()? as usize;
    let date = String::from_utf8(r.take(date_len)?.to_vec())
        .map_err(|_| CmdError::format(path, "date is not valid UTF-8"))?;
    let cloud_cover = r.f32()?;
    let n = bands
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| CmdError::format(path, "raster volume overflows"))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    if r.pos != buf.len() {
        return Err(CmdError::format(
            path,
            format!("{} trailing bytes at offset {}", buf.len() - r.pos, r.pos),
        ));
    }
    let raster = Tensor::from_vec(vec![bands, h, w], data)
        .map_err(|e| CmdError::format(path, e.to_string()))?;
    let tile = Tile {
        tile_id,
        raster,
        lat,
        lon,
        date,
        source,
        cloud_cover,
    };
    tile.validate()
        .map_err(|e| CmdError::format(path, e.to_string()))?;
    Ok(tile)
}

pub fn write_tile(path: &Path, tile: &Tile) -> CmdResult<()> {
    let bytes = encode_tile(tile)?;
    write_atomic(path, &bytes)
}

/// Loads a tile; the id defaults to the file stem.
pub fn load_tile(path: &Path) -> CmdResult<Tile> {
    let buf = fs::read(path).map_err(|e| CmdError::io(path, e))?;
    let tile_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_tile(path, &buf, tile_id)
}
