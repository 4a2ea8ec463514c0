//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key must be known to the target type and may appear at most once.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config {
                key: content.to_string(),
                line,
                msg: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config {
                key: String::new(),
                line,
                msg: "empty key".into(),
            });
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                key: key.into(),
                line,
                msg: format!("duplicate key (first set on line {})", prev.line),
            });
        }
        entries.push(Entry {
            key: key.into(),
            value: value.into(),
            line,
        });
    }
    Ok(entries)
}

/// A configuration type addressable through flat key-value text.
pub trait KvConfig: Default {
    /// Assign one field; `Err` carries a human-readable reason. Unknown keys
    /// must be reported as errors.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;

    /// Render every field as `key = value` lines, parseable by [`KvConfig::from_text`].
    fn to_text(&self) -> String;

    /// Cross-field validation after all keys are applied.
    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }

    fn from_text(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    /// Apply the assignments in `text` on top of `self`, then validate.
    fn apply_text(mut self, text: &str) -> Result<Self> {
        for e in parse_entries(text)? {
            self.set(&e.key, &e.value).map_err(|msg| Error::Config {
                key: e.key.clone(),
                line: e.line,
                msg,
            })?;
        }
        self.validate().map_err(Error::Invalid)?;
        Ok(self)
    }

    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn unknown_key(key: &str) -> String {
    format!("unknown key `{key}`")
}

pub fn parse_usize(value: &str) -> std::result::Result<usize, String> {
    value
        .parse()
        .map_err(|_| format!("expected a non-negative integer, got `{value}`"))
}

pub fn parse_u64(value: &str) -> std::result::Result<u64, String> {
    value
        .parse()
        .map_err(|_| format!("expected a non-negative integer, got `{value}`"))
}

pub fn parse_f64(value: &str) -> std::result::Result<f64, String> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite number, got `{value}`")),
    }
}

pub fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got `{value}`")),
    }
}

pub fn parse_f64_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value.split(',').map(|v| parse_f64(v.trim())).collect()
}
