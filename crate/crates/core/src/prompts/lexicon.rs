//! Anomaly suffix lexicon.
//!
//! File format (UTF-8): a `[generic]` section and any number of
//! `[object:<name>]` sections, one suffix per line, `#` starts a comment.
//!
//! ```text
//! [generic]
//! with flaw
//! [object:bottle]
//! with broken large
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generic suffixes used when no lexicon file is supplied.
pub const DEFAULT_GENERIC_SUFFIXES: [&str; 4] =
    ["with flaw", "with defect", "with damage", "with imperfection"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixLexicon {
    pub generic: Vec<String>,
    pub per_object: BTreeMap<String, Vec<String>>,
}

fn push_unique(list: &mut Vec<String>, s: &str) {
    if !list.iter().any(|x| x == s) {
        list.push(s.to_string());
    }
}

impl SuffixLexicon {
    pub fn with_default_generic() -> Self {
        let mut lex = Self::default();
        for s in DEFAULT_GENERIC_SUFFIXES {
            push_unique(&mut lex.generic, s);
        }
        lex
    }

    pub fn parse(text: &str) -> Result<Self> {
        enum Section {
            None,
            Generic,
            Object(String),
        }
        let mut lex = Self::default();
        let mut section = Section::None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = if header == "generic" {
                    Section::Generic
                } else if let Some(obj) = header.strip_prefix("object:") {
                    let obj = obj.trim();
                    if obj.is_empty() {
                        return Err(Error::input(format!("line {}: empty object name", lineno + 1)));
                    }
                    lex.per_object.entry(obj.to_string()).or_default();
                    Section::Object(obj.to_string())
                } else {
                    return Err(Error::input(format!(
                        "line {}: unknown section [{header}]",
                        lineno + 1
                    )));
                };
                continue;
            }
            match &section {
                Section::None => {
                    return Err(Error::input(format!(
                        "line {}: suffix outside of a section",
                        lineno + 1
                    )))
                }
                Section::Generic => push_unique(&mut lex.generic, line),
                Section::Object(o) => {
                    push_unique(lex.per_object.get_mut(o).expect("section registered"), line)
                }
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn render(&self) -> String {
        let mut out = String::from("[generic]\n");
        for s in &self.generic {
            let _ = writeln!(out, "{s}");
        }
        for (obj, list) in &self.per_object {
            let _ = writeln!(out, "[object:{obj}]");
            for s in list {
                let _ = writeln!(out, "{s}");
            }
        }
        out
    }

    /// Adds `with <label>` suffixes for `object`, mapping underscores to spaces.
    pub fn add_labels<S: AsRef<str>>(&mut self, object: &str, labels: &[S]) {
        let entry = self.per_object.entry(object.to_string()).or_default();
        for label in labels {
            let words = label.as_ref().replace('_', " ");
            let words = words.split_whitespace().collect::<Vec<_>>().join(" ");
            if !words.is_empty() {
                push_unique(entry, &format!("with {words}"));
            }
        }
    }

    /// Manual suffixes for `object`: the generic list followed by the
    /// object-specific ones, de-duplicated.
    pub fn suffixes_for(&self, object: &str) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.generic {
            push_unique(&mut out, s);
        }
        if let Some(list) = self.per_object.get(object) {
            for s in list {
                push_unique(&mut out, s);
            }
        }
        out
    }
}
