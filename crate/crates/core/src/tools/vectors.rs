//! Word vectors in the plain text format: one token followed by its
//! space-separated components per line. A leading `count dim` header line
//! is accepted and skipped.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::ToolError;

#[derive(Debug, Clone, Default)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl WordVectorTable {
    /// Builds a table from `(word, vector)` pairs; later duplicates (after
    /// case folding) are ignored.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, ToolError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<str>,
    {
        let mut table = WordVectorTable::default();
        for (i, (word, v)) in pairs.into_iter().enumerate() {
            table.insert(word.as_ref(), v, &format!("entry {}", i + 1))?;
        }
        Ok(table)
    }

    fn insert(&mut self, word: &str, v: Vec<f32>, locator: &str) -> Result<(), ToolError> {
        let bad = |message: String| ToolError::Malformed {
            locator: locator.to_string(),
            message,
        };
        if v.is_empty() {
            return Err(bad(format!("`{word}` has no components")));
        }
        if self.dim == 0 {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(bad(format!(
                "`{word}` has {} components, expected {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("`{word}` has a non-finite component")));
        }
        self.vectors.entry(word.to_lowercase()).or_insert(v);
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, ToolError> {
        let mut table = WordVectorTable::default();
        for (n, line) in text.lines().enumerate() {
            let locator = format!("{source}:{}", n + 1);
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if n == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
            let v = rest
                .iter()
                .map(|f| f.parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ToolError::Malformed {
                    locator: locator.clone(),
                    message: e.to_string(),
                })?;
            table.insert(word, v, &locator)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
        WordVectorTable::parse(&text, &path.display().to_string())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Case-folded lookup.
    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.vectors.get(&word.to_lowercase()).map(Vec::as_slice)
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_header() {
        let t = WordVectorTable::parse("Shelf 1 0 0\nbed 0 1 0.5\n", "v").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get("SHELF"), Some(&[1.0, 0.0, 0.0][..]));
        let h = WordVectorTable::parse("2 2\na 1 2\nb 3 4\n", "v").unwrap();
        assert_eq!((h.len(), h.dim()), (2, 2));
    }

    #[test]
    fn rejects_ragged_rows() {
        let err = WordVectorTable::parse("a 1 2\nb 1 2 3\n", "v.txt").unwrap_err();
        assert!(err.to_string().starts_with("v.txt:2"), "{err}");
        assert!(WordVectorTable::parse("a 1 x\n", "v").is_err());
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
