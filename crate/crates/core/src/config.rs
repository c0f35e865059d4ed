//! Flat, typed key-value text configs.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws* ('#' any*)?
//! key     := [A-Za-z0-9_.]+
//! ```
//!
//! Values are untyped text; typed getters parse on demand. Duplicate keys are
//! an error. Serialization writes `key = value` lines in insertion order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: IndexMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(Error::config(format!("line {}: invalid key {key:?}", lineno + 1)));
            }
            if kv.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed lookup; `Ok(None)` when absent, an error when unparsable.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("{key}: cannot parse {raw:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(raw) = self.entries.get(key) else { return Ok(None) };
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::config(format!("{key}: cannot parse {raw:?}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on any key not in `known`, which catches typos in config files.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let kv = KeyValues::parse("# header\nseed = 7\nlr=0.01 # trailing\n\nwidths = 1, 2,3\nname = toy\n").unwrap();
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.01));
        assert_eq!(kv.get_list::<usize>("widths").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.get_str("name"), Some("toy"));
        assert_eq!(kv.get::<u64>("missing").unwrap(), None);
        assert!(kv.get::<u64>("name").is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("bad key = 1").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KeyValues::new();
        kv.set("b", 2);
        kv.set("a", "x");
        assert_eq!(kv.to_text(), "b = 2\na = x\n");
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }
}
