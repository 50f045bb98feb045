//! Flat `key = value` configuration text, as embedded in checkpoints and
//! written next to run outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("missing key '{0}'")]
    Missing(String),
    #[error("key '{key}': cannot parse '{value}': {message}")]
    Value { key: String, value: String, message: String },
    #[error("unknown key '{0}'")]
    Unknown(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Sorted string map. Lines starting with `#` and blank lines are ignored
/// when parsing; rendering emits one `key = value` line per entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = parse_assignment(line).ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k, v);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overwrites entries of `self` with those of `other`.
    pub fn merge(&mut self, other: &FlatConfig) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))?;
        raw.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.to_string(),
            value: raw.to_string(),
            message: e.to_string(),
        })
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        if self.contains(key) {
            self.require(key)
        } else {
            Ok(default)
        }
    }
}

impl fmt::Display for FlatConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Splits `key=value` (whitespace around either side is trimmed).
pub fn parse_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    if k.is_empty() || k.contains(char::is_whitespace) {
        return None;
    }
    Some((k, v.trim()))
}
