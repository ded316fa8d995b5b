//! Flat `key=value` text files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Invalid { key: String, value: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                return Err(KvError::UnknownKey(k.to_string()));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(KvError::Duplicate(k.to_string()));
            }
        }
        Ok(Self { entries })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        self.raw(key)
            .map(|v| {
                v.parse().map_err(|_| KvError::Invalid {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Serializes in key order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown() {
        let kv = KvFile::parse("a = 1 # one\n\n# full line\nb=x\n", &["a", "b"]).unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.raw("b"), Some("x"));
        assert_eq!(KvFile::parse("c=1", &["a"]), Err(KvError::UnknownKey("c".into())));
        assert!(matches!(KvFile::parse("a", &["a"]), Err(KvError::Syntax { line: 1, .. })));
        assert_eq!(KvFile::parse("a=1\na=2", &["a"]), Err(KvError::Duplicate("a".into())));
        assert_eq!(kv.require::<u32>("zz"), Err(KvError::Missing("zz".into())));
        assert!(kv.get::<u32>("b").is_err());
    }
}
