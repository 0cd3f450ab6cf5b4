//! Flat key-value configuration with section headers.
//!
//! ```text
//! # comment
//! command = homogenize
//!
//! [ensemble]
//! kind = checkerboard
//! phases = 1, 4
//! ```
//!
//! A line is blank, a comment (`#` to the end of the line, also after a
//! value), a section header `[name]` or an entry `key = value`. Entries
//! before the first header are top-level; the others are addressed as
//! `section.key`. Keys are unique. Every key must be consumed by the command
//! that runs (sections owned by other commands are skipped), so a typo is
//! reported instead of silently ignored. The grammar and all keys are listed
//! in `docs/config.md`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate key `{key}` (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}` (line {line}): {msg}")]
    Invalid { key: String, line: usize, msg: String },
    #[error("unknown key `{key}` (line {line})")]
    Unknown { key: String, line: usize },
    #[error("cannot read config: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Parsed entries; lookups record which keys were consumed.
#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        let mut section = String::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(ConfigError::Syntax { line, msg: "unterminated section header".into() })?.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(ConfigError::Syntax { line, msg: format!("bad section name `{name}`") });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line, msg: "expected `key = value`".into() })?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(ConfigError::Syntax { line, msg: format!("bad key `{key}`") });
            }
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if let Some((_, first)) = entries.get(&full) {
                return Err(ConfigError::Duplicate { key: full, first: *first, second: line });
            }
            entries.insert(full, (value.trim().to_string(), line));
        }
        Ok(Config { entries, used: RefCell::new(BTreeSet::new()) })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<(&str, usize)> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some((e.0.as_str(), e.1))
    }

    fn invalid(key: &str, line: usize, msg: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { key: key.to_string(), line, msg: msg.into() }
    }

    /// An error for `key` that points at its line.
    pub fn reject(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
        Self::invalid(key, line, msg)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.raw(key).map(|(v, _)| v.to_string()).unwrap_or_else(|| default.to_string())
    }

    pub fn string(&self, key: &str) -> Result<String> {
        self.raw(key).map(|(v, _)| v.to_string()).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| Self::invalid(key, line, format!("cannot parse `{v}`"))),
        }
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// A strictly positive number.
    pub fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.or(key, default)?;
        if !(v > 0.0) || !v.is_finite() {
            let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
            return Err(Self::invalid(key, line, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    pub fn positive_count(&self, key: &str, default: usize) -> Result<usize> {
        let v: usize = self.or(key, default)?;
        if v == 0 {
            let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
            return Err(Self::invalid(key, line, "must be positive"));
        }
        Ok(v)
    }

    pub fn boolean(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(("true" | "yes" | "1", _)) => Ok(true),
            Some(("false" | "no" | "0", _)) => Ok(false),
            Some((v, line)) => Err(Self::invalid(key, line, format!("expected true or false, got `{v}`"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Self::invalid(key, line, format!("cannot parse list item `{}`", s.trim()))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        Ok(self.list(key)?.unwrap_or(default))
    }

    /// A list of exactly `N` numbers.
    pub fn array<const N: usize>(&self, key: &str, default: [f64; N]) -> Result<[f64; N]> {
        match self.list::<f64>(key)? {
            None => Ok(default),
            Some(v) => {
                let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Self::invalid(key, line, "values must be finite"));
                }
                v.try_into().map_err(|v: Vec<f64>| Self::invalid(key, line, format!("expected {N} numbers, got {}", v.len())))
            }
        }
    }

    /// Seeds as `a..b` or a comma-separated list; never empty.
    pub fn seeds(&self, key: &str, default: Range<u64>) -> Result<Vec<u64>> {
        let out: Vec<u64> = match self.raw(key) {
            None => default.collect(),
            Some((v, line)) => {
                if let Some((a, b)) = v.split_once("..") {
                    let a: u64 = a.trim().parse().map_err(|_| Self::invalid(key, line, format!("bad range start `{a}`")))?;
                    let b: u64 = b.trim().parse().map_err(|_| Self::invalid(key, line, format!("bad range end `{b}`")))?;
                    (a..b).collect()
                } else {
                    self.used.borrow_mut().remove(key);
                    self.list(key)?.unwrap_or_default()
                }
            }
        };
        if out.is_empty() {
            let line = self.entries.get(key).map(|e| e.1).unwrap_or(0);
            return Err(Self::invalid(key, line, "seed list is empty"));
        }
        Ok(out)
    }

    /// Fails on the first key no lookup has touched.
    pub fn finish(&self) -> Result<()> {
        self.finish_except(&[])
    }

    /// As [`Config::finish`], ignoring keys of the sections in `skip`.
    pub fn finish_except(&self, skip: &[&str]) -> Result<()> {
        let used = self.used.borrow();
        for (k, (_, line)) in &self.entries {
            let section = k.split_once('.').map(|s| s.0);
            if section.is_some_and(|s| skip.contains(&s)) {
                continue;
            }
            if !used.contains(k) {
                return Err(ConfigError::Unknown { key: k.clone(), line: *line });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "command = check # trailing\n\n[ensemble]\nphases = 1, 4\nlambda = 4\n[run]\nseeds = 3..6\n";

    #[test]
    fn parses_sections_and_lists() {
        let c = Config::parse(TEXT).unwrap();
        assert_eq!(c.string("command").unwrap(), "check");
        assert_eq!(c.list::<f64>("ensemble.phases").unwrap(), Some(vec![1.0, 4.0]));
        assert_eq!(c.positive("ensemble.lambda", 1.0).unwrap(), 4.0);
        assert_eq!(c.seeds("run.seeds", 0..1).unwrap(), vec![3, 4, 5]);
        c.finish().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let c = Config::parse("[ensemble]\nlambda = abc\n").unwrap();
        let e = c.positive("ensemble.lambda", 1.0).unwrap_err();
        assert!(e.to_string().contains("ensemble.lambda"), "{e}");
        let c = Config::parse("[a]\nx = 1\nx = 2\n").unwrap_err();
        assert!(c.to_string().contains("a.x"));
        let c = Config::parse("[a]\ntypo = 1\n").unwrap();
        assert!(c.finish().unwrap_err().to_string().contains("a.typo"));
        assert!(c.finish_except(&["a"]).is_ok());
        let c = Config::parse("[a]\nn = -1\n").unwrap();
        assert!(c.positive("a.n", 1.0).unwrap_err().to_string().contains("a.n"));
        let c = Config::parse("[a]\ns = 4..4\n").unwrap();
        assert!(c.seeds("a.s", 0..1).is_err());
        assert!(Config::parse("[a\n").is_err());
        assert!(Config::parse("novalue\n").is_err());
    }
}
