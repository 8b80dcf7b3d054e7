//! `key = value` run configuration files with `#` comments.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use polyproj::{Error, Result};

/// Parsed key/value pairs. Every key must be read exactly once through
/// [`Config::required`] or [`Config::optional`]; [`Config::finish`] rejects
/// whatever is left over.
#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "line {}: expected key = value, got '{line}'",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            if entries
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse(format!("duplicate key '{key}'")));
            }
        }
        Ok(Self {
            entries,
            ..Self::default()
        })
    }

    fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Parse(format!("invalid value '{raw}' for key '{key}'")))
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self
            .entries
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Input(format!("missing required config key '{key}'")))?;
        self.used.insert(key.to_string());
        self.resolved.insert(key.to_string(), raw.clone());
        Self::parse_value(key, &raw)
    }

    pub fn optional<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key).cloned() {
            Some(raw) => {
                self.used.insert(key.to_string());
                self.resolved.insert(key.to_string(), raw.clone());
                Self::parse_value(key, &raw)
            }
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn required_list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let raw: String = self.required(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Self::parse_value(key, s))
            .collect()
    }

    pub fn finish(&self) -> Result<()> {
        match self.entries.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(Error::Input(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }

    /// Every key read so far with its effective value, defaults included.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}
