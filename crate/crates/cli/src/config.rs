//! Flat key-value run configuration.
//!
//! Every command resolves its settings through three layers: command-line
//! flags beat the optional `--config` file, which beats built-in defaults.
//! The resolver records every key it touched so the command can echo its
//! fully-resolved configuration into a run manifest; feeding that manifest
//! back through `--config` reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cycleseg::{Error, Result};

/// Parsed `key = value` file. Blank lines and `#` comments are skipped.
#[derive(Default)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        if !path.is_file() {
            return Err(Error::MissingInput(format!(
                "config file {} not found",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { map })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }
}

/// Layered lookup that remembers everything it resolved.
pub struct Resolver<'a> {
    file: &'a FileConfig,
    resolved: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a FileConfig) -> Self {
        Resolver {
            file,
            resolved: BTreeMap::new(),
        }
    }

    fn record<V: Display>(&mut self, key: &str, value: V) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Flag > file > default for any parseable value.
    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(text) => text.parse::<T>().map_err(|_| {
                    Error::config(format!("config key {key}: cannot parse {text:?}"))
                })?,
                None => default,
            },
        };
        self.record(key, &v);
        Ok(v)
    }

    /// Boolean expressed as `on` / `off` (the only accepted spellings).
    pub fn switch(&mut self, key: &str, flag: Option<&str>, default: bool) -> Result<bool> {
        let text = match flag {
            Some(t) => t.to_string(),
            None => match self.file.get(key) {
                Some(t) => t.to_string(),
                None => if default { "on" } else { "off" }.to_string(),
            },
        };
        let v = match text.as_str() {
            "on" => true,
            "off" => false,
            other => {
                return Err(Error::config(format!(
                    "config key {key}: expected on or off, got {other:?}"
                )))
            }
        };
        self.record(key, if v { "on" } else { "off" });
        Ok(v)
    }

    /// Comma-separated list of unsigned integers (e.g. readout levels).
    pub fn usize_list(
        &mut self,
        key: &str,
        flag: Option<&str>,
        default: &[usize],
    ) -> Result<Vec<usize>> {
        let text = match flag {
            Some(t) => t.to_string(),
            None => match self.file.get(key) {
                Some(t) => t.to_string(),
                None => default
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            },
        };
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            out.push(part.parse::<usize>().map_err(|_| {
                Error::config(format!("config key {key}: cannot parse {part:?} as integer"))
            })?);
        }
        self.record(key, out.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        Ok(out)
    }

    /// A path the command cannot run without, from flag or file.
    pub fn required_path(&mut self, key: &str, flag: Option<&Path>) -> Result<PathBuf> {
        let v = match flag {
            Some(p) => p.to_path_buf(),
            None => match self.file.get(key) {
                Some(text) => PathBuf::from(text),
                None => {
                    return Err(Error::config(format!(
                        "missing required setting {key} (flag or config file)"
                    )))
                }
            },
        };
        self.record(key, v.display());
        Ok(v)
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<&Path>) -> Option<PathBuf> {
        let v = match flag {
            Some(p) => Some(p.to_path_buf()),
            None => self.file.get(key).map(PathBuf::from),
        };
        if let Some(p) = &v {
            self.record(key, p.display());
        }
        v
    }

    /// The fully-resolved configuration as sorted `key = value` lines.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Output paths are optionally rehomed under CYCLESEG_OUTPUT_ROOT so batch
/// runs can redirect every artifact without touching saved manifests.
pub fn resolve_output_root(path: &Path) -> PathBuf {
    match std::env::var_os("CYCLESEG_OUTPUT_ROOT") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
