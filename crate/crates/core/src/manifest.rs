//! Plain `key: value` manifests that accompany tensor files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let v = value.to_string();
        assert!(!v.contains('\n') && !key.contains(':'), "manifest entries are single-line");
        self.entries.insert(key.to_string(), v);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed lookup; `origin` names the manifest in errors.
    pub fn parse<T: FromStr>(&self, key: &str, origin: &str) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| Error::Format {
            path: origin.to_string(),
            detail: format!("missing manifest key '{}'", key),
        })?;
        raw.parse().map_err(|_| Error::Format {
            path: origin.to_string(),
            detail: format!("manifest key '{}' has unparsable value '{}'", key, raw),
        })
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut m = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| Error::Format {
                path: origin.to_string(),
                detail: format!("line {}: expected 'key: value'", lineno + 1),
            })?;
            m.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| io_err(path, e))
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{}: {}", k, v)?;
        }
        Ok(())
    }
}

/// FNV-1a over bytes; used for dataset and config checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
