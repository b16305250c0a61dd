//! File formats, pipeline commands, and the `geosdg` CLI for the
//! satellite water/sanitation mapping pipeline. All numerics live in
//! `geosdg-core`; this crate owns everything that touches the
//! filesystem.

use std::path::Path;

pub mod cli;
pub mod commands;
pub mod config;
pub mod errors;
pub mod formats;

pub use errors::{CmdError, CmdResult};

/// Writes a file atomically: temp file in the same directory, then
/// rename. Partial outputs never become visible under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CmdError::io(dir, e))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| CmdError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CmdError::io(path, e))?;
    Ok(())
}

/// Machine-parsable progress line on stderr.
pub fn log(msg: impl std::fmt::Display) {
    eprintln!("geosdg: {msg}");
}
