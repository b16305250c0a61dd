//! Run configuration: presets, the optional key=value config file, and
//! the flag-over-file merge rule.

use std::collections::BTreeMap;
use std::path::Path;

use geosdg_core::vit::ModelConfig;

use crate::errors::{CmdError, CmdResult};

/// Parsed `key = value` config file; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CmdResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let content =
            std::fs::read_to_string(path).map_err(|e| CmdError::io(path, e))?;
        let mut values = BTreeMap::new();
        for (i, line) in content.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CmdError::format(
                    path,
                    format!("row {}: expected 'key = value'", i + 1),
                ));
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// Flag wins over file value wins over default.
    pub fn resolve<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> CmdResult<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                CmdError::config(format!("config key '{key}': cannot parse '{raw}'"))
            }),
            None => Ok(default),
        }
    }

    /// As [`resolve`](Self::resolve) but with no default: the value
    /// stays `None` when neither source provides one.
    pub fn resolve_opt<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> CmdResult<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CmdError::config(format!("config key '{key}': cannot parse '{raw}'"))),
            None => Ok(None),
        }
    }
}

/// Model preset selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Base,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Preset::Base),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset '{other}'")),
        }
    }
}

impl Preset {
    pub fn model(self, bands: Option<usize>, image_size: Option<usize>) -> CmdResult<ModelConfig> {
        let mut m = match self {
            Preset::Base => ModelConfig::base(),
            Preset::Desk => ModelConfig::desk(),
        };
        if let Some(b) = bands {
            m.bands = b;
        }
        if let Some(s) = image_size {
            m.image_size = s;
        }
        m.validate().map_err(CmdError::from)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_values() {
        let dir = std::env::temp_dir().join(format!("geosdg-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "steps = 40\n# comment\nbatch_size=8\n").unwrap();
        let cfg = ConfigFile::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve(Some(10u64), "steps", 1).unwrap(), 10);
        assert_eq!(cfg.resolve(None::<u64>, "steps", 1).unwrap(), 40);
        assert_eq!(cfg.resolve(None::<u64>, "missing", 7).unwrap(), 7);
        assert!(cfg.resolve(None::<u64>, "batch_size", 0).is_ok());
        std::fs::write(&path, "not a kv line\n").unwrap();
        assert!(ConfigFile::load(Some(&path)).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
