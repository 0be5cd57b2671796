//! Share of expression tokens that fall under a target concept (such as
//! `color` or `shape`) in a precomputed hypernym closure.
//!
//! The closure file holds one `word<TAB>ancestor` pair per line; blank
//! lines and lines starting with `#` are ignored. A word counts under a
//! target when any of its senses has the target among its ancestors, so
//! the generator writes the union over senses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ToolError;
use crate::data::{Mode, ReferringExpression};

#[derive(Debug, Clone, Default)]
pub struct HypernymClosure {
    ancestors: HashMap<String, BTreeSet<String>>,
}

impl HypernymClosure {
    pub fn from_pairs<I, S, T>(pairs: I) -> Result<Self, ToolError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut c = HypernymClosure::default();
        for (i, (w, a)) in pairs.into_iter().enumerate() {
            c.insert(w.as_ref(), a.as_ref(), &format!("pair {}", i + 1))?;
        }
        Ok(c)
    }

    fn insert(&mut self, word: &str, ancestor: &str, locator: &str) -> Result<(), ToolError> {
        let (w, a) = (word.to_lowercase(), ancestor.to_lowercase());
        if w.is_empty() || a.is_empty() {
            return Err(ToolError::Malformed {
                locator: locator.into(),
                message: "empty word or ancestor".into(),
            });
        }
        if w == a {
            return Err(ToolError::Malformed {
                locator: locator.into(),
                message: format!("`{w}` listed as its own ancestor"),
            });
        }
        self.ancestors.entry(w).or_default().insert(a);
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, ToolError> {
        let mut c = HypernymClosure::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let locator = format!("{source}:{}", n + 1);
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(w), Some(a), None) => c.insert(w.trim(), a.trim(), &locator)?,
                _ => {
                    return Err(ToolError::Malformed {
                        locator,
                        message: "expected `word<TAB>ancestor`".into(),
                    })
                }
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
        HypernymClosure::parse(&text, &path.display().to_string())
    }

    pub fn words(&self) -> usize {
        self.ancestors.len()
    }

    /// Whether `word` (case-folded) has `target` among its ancestors.
    pub fn is_hyponym(&self, word: &str, target: &str) -> bool {
        self.ancestors
            .get(&word.to_lowercase())
            .is_some_and(|s| s.contains(&target.to_lowercase()))
    }
}

/// Lowercases and trims leading and trailing non-alphanumeric characters.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeProfile {
    pub mode: Mode,
    pub expressions: usize,
    /// Every whitespace token, punctuation-only ones included.
    pub tokens: usize,
    pub counts: BTreeMap<String, usize>,
    /// Percent of `tokens`, unrounded.
    pub percent: BTreeMap<String, f64>,
    /// Set when `tokens` is zero; the percentages are then 0.
    pub zero_denominator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalProfile {
    pub targets: Vec<String>,
    pub modes: Vec<ModeProfile>,
}

impl LexicalProfile {
    pub fn mode(&self, mode: Mode) -> &ModeProfile {
        self.modes.iter().find(|m| m.mode == mode).expect("both modes present")
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:>8}", "Mode", "Tokens");
        for t in &self.targets {
            out.push_str(&format!(" {:>8}", format!("{t} %")));
        }
        out.push('\n');
        for m in &self.modes {
            out.push_str(&format!("{:<12} {:>8}", m.mode.as_str(), m.tokens));
            for t in &self.targets {
                out.push_str(&format!(" {:>8.1}", m.percent[t]));
            }
            out.push('\n');
        }
        out
    }
}

pub fn lexical_profile<'a>(
    expressions: impl IntoIterator<Item = &'a ReferringExpression>,
    closure: &HypernymClosure,
    targets: &[&str],
) -> LexicalProfile {
    let modes = [Mode::Visual, Mode::Blindfolded];
    let mut profiles: Vec<ModeProfile> = modes
        .iter()
        .map(|&mode| ModeProfile {
            mode,
            expressions: 0,
            tokens: 0,
            counts: targets.iter().map(|t| (t.to_string(), 0)).collect(),
            percent: BTreeMap::new(),
            zero_denominator: false,
        })
        .collect();
    for e in expressions {
        let p = &mut profiles[if e.mode == Mode::Visual { 0 } else { 1 }];
        p.expressions += 1;
        for tok in e.tokens() {
            p.tokens += 1;
            let word = normalize_token(tok);
            for t in targets {
                if closure.is_hyponym(&word, t) {
                    *p.counts.get_mut(*t).expect("target counted") += 1;
                }
            }
        }
    }
    for p in &mut profiles {
        p.zero_denominator = p.tokens == 0;
        p.percent = p
            .counts
            .iter()
            .map(|(t, &c)| {
                let pct = if p.tokens == 0 { 0.0 } else { 100.0 * c as f64 / p.tokens as f64 };
                (t.clone(), pct)
            })
            .collect();
    }
    LexicalProfile {
        targets: targets.iter().map(|t| t.to_string()).collect(),
        modes: profiles,
    }
}
