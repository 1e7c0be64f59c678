//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs. Every key must be consumed by the caller;
/// [`KeyValues::finish`] reports the leftovers as unknown keys.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {line_no}: expected key=value, found {line:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries.insert(k.to_string(), (line_no, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {k:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: invalid value {v:?} for {key}: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => match v.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("line {line}: {key} expects a boolean, found {v:?}"))),
            },
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
        }
        Ok(())
    }
}
