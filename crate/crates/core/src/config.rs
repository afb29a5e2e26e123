//! Line-based `key = value` configuration files with `[section]` headers.
//!
//! `#` and `;` start comments. Keys before the first header belong to the
//! empty section. Every key must be consumed by the reader; leftovers are
//! reported as errors by [`ConfigFile::finish`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(format!("line {}: unterminated section header", line_no)))?
                    .trim();
                if name.is_empty() {
                    return Err(config_err(format!("line {}: empty section name", line_no)));
                }
                section = name.to_string();
                out.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", line_no)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(config_err(format!("line {}: empty key", line_no)));
            }
            let entries = out.sections.entry(section.clone()).or_default();
            let prev = entries.insert(
                key.to_string(),
                Entry {
                    value: v.trim().to_string(),
                    line: line_no,
                },
            );
            if let Some(p) = prev {
                return Err(config_err(format!(
                    "line {}: duplicate key {:?} (first set on line {})",
                    line_no, key, p.line
                )));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    /// Removes and returns a raw value.
    pub fn take_str(&mut self, section: &str, key: &str) -> Option<String> {
        self.sections
            .get_mut(section)
            .and_then(|s| s.remove(key))
            .map(|e| e.value)
    }

    /// Removes and parses a value.
    pub fn take<T>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(entry) = self.sections.get_mut(section).and_then(|s| s.remove(key)) else {
            return Ok(None);
        };
        entry.value.parse::<T>().map(Some).map_err(|e| {
            config_err(format!(
                "line {}: [{}] {} = {:?}: {}",
                entry.line, section, key, entry.value, e
            ))
        })
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn take_list<T>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(entry) = self.sections.get_mut(section).and_then(|s| s.remove(key)) else {
            return Ok(None);
        };
        entry
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|e| {
                    config_err(format!("line {}: [{}] {}: item {:?}: {}", entry.line, section, key, s, e))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        let mut left: Vec<(usize, String)> = self
            .sections
            .iter()
            .flat_map(|(sec, entries)| {
                entries.iter().map(move |(k, e)| {
                    let name = if sec.is_empty() {
                        k.clone()
                    } else {
                        format!("[{}] {}", sec, k)
                    };
                    (e.line, name)
                })
            })
            .collect();
        if left.is_empty() {
            return Ok(());
        }
        left.sort();
        let list: Vec<String> = left.iter().map(|(l, n)| format!("{} (line {})", n, l)).collect();
        Err(config_err(format!("unknown keys: {}", list.join(", "))))
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_types() {
        let mut c = ConfigFile::parse(
            "name = demo # trailing\n\n[training]\nepochs = 3\nmilestones = 1, 2\n; comment\n[data]\nkind=synthetic\n",
        )
        .unwrap();
        assert_eq!(c.take_str("", "name").as_deref(), Some("demo"));
        assert_eq!(c.take::<usize>("training", "epochs").unwrap(), Some(3));
        assert_eq!(c.take_list::<usize>("training", "milestones").unwrap(), Some(vec![1, 2]));
        assert_eq!(c.take::<usize>("training", "missing").unwrap(), None);
        assert_eq!(c.take_str("data", "kind").as_deref(), Some("synthetic"));
        c.finish().unwrap();
    }

    #[test]
    fn errors() {
        assert!(ConfigFile::parse("[open\n").is_err());
        assert!(ConfigFile::parse("novalue\n").is_err());
        assert!(ConfigFile::parse("a = 1\na = 2\n").is_err());
        let mut c = ConfigFile::parse("[t]\nepochs = three\nextra = 1\n").unwrap();
        let e = c.take::<usize>("t", "epochs").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{}", e);
        let e = c.finish().unwrap_err().to_string();
        assert!(e.contains("[t] extra (line 3)"), "{}", e);
    }
}
