//! Flat key-value configuration files and run manifests.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines are ignored. Values are plain strings; typed accessors parse on
//! demand. Flags override file values, and every run writes the fully
//! resolved set back into its manifest so it can be re-executed.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::DataError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DataError::Parse {
                    offset: lineno as u64 + 1,
                    reason: format!("line {}: expected `key = value`, got `{raw}`", lineno + 1),
                });
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { map })
    }

    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Typed lookup with a default.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, DataError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| DataError::Parse {
                offset: 0,
                reason: format!("config key `{key}`: cannot parse `{v}`"),
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, DataError> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") | Some("on") => Ok(true),
            Some("false") | Some("0") | Some("no") | Some("off") => Ok(false),
            Some(v) => Err(DataError::Parse {
                offset: 0,
                reason: format!("config key `{key}`: expected a boolean, got `{v}`"),
            }),
        }
    }

    /// Progressive schedule: `bin:epochs` pairs separated by commas,
    /// e.g. `16:300,8:150,1:150`.
    pub fn get_stages(
        &self,
        key: &str,
        default: &[(usize, usize)],
    ) -> Result<Vec<(usize, usize)>, DataError> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let Some((bin, epochs)) = part.trim().split_once(':') else {
                        return Err(DataError::Parse {
                            offset: 0,
                            reason: format!("config key `{key}`: expected `bin:epochs`, got `{part}`"),
                        });
                    };
                    let parse = |s: &str| {
                        s.trim().parse::<usize>().map_err(|_| DataError::Parse {
                            offset: 0,
                            reason: format!("config key `{key}`: bad number `{s}`"),
                        })
                    };
                    let bin = parse(bin)?;
                    if bin == 0 {
                        return Err(DataError::Parse {
                            offset: 0,
                            reason: format!("config key `{key}`: bin must be at least 1"),
                        });
                    }
                    out.push((bin, parse(epochs)?));
                }
                Ok(out)
            }
        }
    }

    /// Render as config-file text, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// A run manifest: the command, tool version, and the fully resolved
/// configuration, written next to every command's outputs. Re-running from
/// a manifest reproduces the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Resolved configuration, inputs and seed, flattened to key-value.
    pub config: Config,
}

impl RunManifest {
    pub fn new(command: &str, config: Config) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str(&format!("command = {}\n", self.command));
        out.push_str(&format!("version = {}\n", self.version));
        for (k, v) in self.config.entries() {
            out.push_str(&format!("config.{k} = {v}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let all = Config::from_file(path)?;
        let command = all
            .raw("command")
            .ok_or_else(|| DataError::Parse {
                offset: 0,
                reason: "manifest is missing `command`".into(),
            })?
            .to_string();
        let version = all.raw("version").unwrap_or("unknown").to_string();
        let mut config = Config::default();
        for (k, v) in all.entries() {
            if let Some(stripped) = k.strip_prefix("config.") {
                config.set(stripped, v);
            }
        }
        Ok(RunManifest {
            command,
            version,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let cfg = Config::parse("a = 1\n\n# comment\nb= two words  # trailing\n").unwrap();
        assert_eq!(cfg.get::<i32>("a", 0).unwrap(), 1);
        assert_eq!(cfg.raw("b"), Some("two words"));
        assert_eq!(cfg.get::<f64>("missing", 2.5).unwrap(), 2.5);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("just a line\n").is_err());
        let cfg = Config::parse("x = abc\n").unwrap();
        assert!(cfg.get::<f64>("x", 0.0).is_err());
    }

    #[test]
    fn stage_lists_parse() {
        let cfg = Config::parse("stages = 16:300, 8:150,1:150\n").unwrap();
        assert_eq!(
            cfg.get_stages("stages", &[]).unwrap(),
            vec![(16, 300), (8, 150), (1, 150)]
        );
        let bad = Config::parse("stages = 0:10\n").unwrap();
        assert!(bad.get_stages("stages", &[]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.set("seed", 7);
        cfg.set("dataset", "/tmp/ds.vskt");
        let m = RunManifest::new("train", cfg);
        let path = dir.path().join("manifest.txt");
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
    }
}
