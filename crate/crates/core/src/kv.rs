//! Flat `key = value` text with `#` comments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed entries, keyed by name, each remembering its line number.
#[derive(Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no}: expected `key = value`"
                )));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries
                .insert(key.clone(), (v.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key `{key}`"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    /// Removes and parses `key`, leaving `default` when absent.
    pub fn take_parsed<V: std::str::FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                Error::Config(format!("line {line}: invalid value {v:?} for `{key}`"))
            }),
        }
    }

    /// Removes every key starting with `prefix`, returning `(suffix, value)`.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let (v, _) = self.entries.remove(&k).unwrap();
                (k[prefix.len()..].to_string(), v)
            })
            .collect()
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_unknown_keys() {
        let mut kv = KvMap::parse("# header\n a = 1 # trailing\n\nb=x\nzzz = 3\n").unwrap();
        assert_eq!(kv.take_parsed("a", 0usize).unwrap(), 1);
        assert_eq!(kv.take("b").as_deref(), Some("x"));
        assert_eq!(kv.take_parsed("missing", 7usize).unwrap(), 7);
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        assert!(KvMap::parse("novalue\n").is_err());
        assert!(KvMap::parse("a = 1\na = 2\n").is_err());
        let mut kv = KvMap::parse("n = abc").unwrap();
        assert!(kv.take_parsed("n", 1usize).is_err());
    }
}
