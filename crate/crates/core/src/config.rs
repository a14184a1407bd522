//! `key = value` configuration text.

use crate::error::{Error, Result};

/// One `key = value` entry with its 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Split config text into entries. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config { line: i + 1, message: format!("expected `key = value`, got {line:?}") });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config { line: i + 1, message: "empty key".into() });
        }
        out.push(Entry { line: i + 1, key: key.to_string(), value: v.trim().to_string() });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: std::str::FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| self.error(format!("{}: {e}", self.key)))
    }

    pub fn parse_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            v => Err(self.error(format!("{}: expected a boolean, got {v:?}", self.key))),
        }
    }

    pub fn parse_list(&self) -> Result<Vec<usize>> {
        self.value
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| self.error(format!("{}: {e}", self.key))))
            .collect()
    }

    pub fn error(&self, message: String) -> Error {
        Error::Config { line: self.line, message }
    }

    pub fn unknown(&self) -> Error {
        self.error(format!("unknown key {:?}", self.key))
    }
}
