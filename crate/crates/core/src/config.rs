//! Flat `key = value` text files. `#` starts a comment; blank lines are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs. Typed getters consume keys; [`KeyValues::finish`]
/// reports whatever was left over as unknown.
#[derive(Debug)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{source}:{line_no}: expected `key = value`, got `{line}`"
                )));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{line_no}: empty key")));
            }
            if entries
                .insert(key.clone(), (line_no, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "{source}:{line_no}: duplicate key `{key}`"
                )));
            }
        }
        Ok(Self {
            entries,
            source: source.to_string(),
        })
    }

    pub fn empty(source: &str) -> Self {
        Self {
            entries: BTreeMap::new(),
            source: source.to_string(),
        }
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Removes and parses `key`, if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!(
                    "{}: bad value `{v}` for `{key}`: {e}",
                    self.at(line)
                ))
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|e| {
                    Error::Config(format!(
                        "{}: bad list item `{}` for `{key}`: {e}",
                        self.source,
                        part.trim()
                    ))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn at(&self, line: usize) -> String {
        if line == 0 {
            format!("{} (override)", self.source)
        } else {
            format!("{}:{line}", self.source)
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Config(format!(
                "{}: unknown key `{key}`",
                self.at(*line)
            ))),
        }
    }
}
