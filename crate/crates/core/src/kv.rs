//! Flat key=value text files: one pair per line, `#` comments, order
//! preserved. Used for configs, dataset manifests, and checkpoint
//! sidecars. Readers track which keys were consumed so callers can reject
//! typos instead of silently ignoring them.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {0}: expected key=value, got {1:?}")]
    BadLine(usize, String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default)]
pub struct Kv {
    pairs: Vec<(String, String)>,
    consumed: HashSet<String>,
}

impl Kv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut kv = Kv::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KvError::BadLine(i + 1, line.to_string()))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::BadLine(i + 1, line.to_string()));
            }
            kv.set(k, v.trim())?;
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KvError> {
        if self.pairs.iter().any(|(k, _)| k == key) {
            return Err(KvError::DuplicateKey(key.to_string()));
        }
        self.pairs.push((key.to_string(), value.to_string()));
        Ok(())
    }

    pub fn set_display(&mut self, key: &str, value: impl std::fmt::Display) -> Result<(), KvError> {
        self.set(key, &value.to_string())
    }

    /// Raw lookup; marks the key consumed.
    pub fn get(&mut self, key: &str) -> Option<&str> {
        self.consumed.insert(key.to_string());
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&mut self, key: &str) -> Result<&str, KvError> {
        self.consumed.insert(key.to_string());
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn parse_req<T: std::str::FromStr>(&mut self, key: &str, ty: &'static str) -> Result<T, KvError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| KvError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            ty,
        })
    }

    /// Typed lookup with a default when the key is absent.
    pub fn parse_or<T: std::str::FromStr>(
        &mut self,
        key: &str,
        default: T,
        ty: &'static str,
    ) -> Result<T, KvError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let owned = v.to_string();
                owned.parse().map_err(|_| KvError::BadValue {
                    key: key.to_string(),
                    value: owned.clone(),
                    ty,
                })
            }
        }
    }

    /// Error with the first key nobody consumed; call after reading all
    /// known fields.
    pub fn reject_unknown(&self) -> Result<(), KvError> {
        for (k, _) in &self.pairs {
            if !self.consumed.contains(k) {
                return Err(KvError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }
}
