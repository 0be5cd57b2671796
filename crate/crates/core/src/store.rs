//! Binary container for precomputed language and view embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SNRF" | version u32 | dimension u32 | normalized u8
//!        | encoder len u16 | encoder UTF-8
//!        | language count u64 | vision count u64
//!        | language records: key len u16 | key UTF-8 | dimension x f32
//!        | vision records:   key len u16 | object_id UTF-8 | view u8 | dimension x f32
//! ```
//!
//! Vectors are stored exactly as written; normalization is up to the reader.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::{TaskInstance, ViewIndex};

pub const MAGIC: &[u8; 4] = b"SNRF";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a feature store (bad magic)")]
    BadMagic,
    #[error("unsupported feature store version {0}")]
    UnsupportedVersion(u32),
    #[error("feature store truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("vector for {key} has dimension {actual}, store dimension is {expected}")]
    DimensionMismatch {
        key: String,
        expected: usize,
        actual: usize,
    },
    #[error("vector for {0} has a non-finite component")]
    NonFinite(String),
    #[error("empty embedding vector")]
    Empty,
    #[error("key `{0}` exceeds 65535 bytes")]
    KeyTooLong(String),
    #[error("key is not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid view index {0}")]
    InvalidView(u8),
    #[error("no language embedding for expression `{0}`")]
    MissingLanguage(String),
    #[error("no view embedding for object `{object_id}` view {view}")]
    MissingView { object_id: String, view: ViewIndex },
    #[error("cannot normalize a zero vector")]
    Degenerate,
}

/// Dense embedding with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, StoreError> {
        if values.is_empty() {
            return Err(StoreError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite("<unnamed>".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    /// Unit-L2 copy in 64-bit precision.
    pub fn normalized_f64(&self) -> Result<Vec<f64>, StoreError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(StoreError::Degenerate);
        }
        Ok(self.0.iter().map(|&x| x as f64 / n).collect())
    }

    pub fn normalize(&self) -> Result<EmbeddingVector, StoreError> {
        Ok(EmbeddingVector(
            self.normalized_f64()?.into_iter().map(|x| x as f32).collect(),
        ))
    }

    pub fn scaled(&self, c: f32) -> Result<EmbeddingVector, StoreError> {
        EmbeddingVector::new(self.0.iter().map(|x| x * c).collect())
    }
}

pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, StoreError> {
    v.normalize()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreMeta {
    /// Encoder and preprocessing descriptor, e.g. `clip-vit-b32/white-bg`.
    pub encoder: String,
    pub dimension: usize,
    pub normalized: bool,
}

impl StoreMeta {
    pub fn new(encoder: impl Into<String>, dimension: usize) -> Self {
        StoreMeta {
            encoder: encoder.into(),
            dimension,
            normalized: false,
        }
    }
}

/// Records in write order, as handed to [`write_store`].
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntries {
    pub meta: StoreMeta,
    pub language: Vec<(String, EmbeddingVector)>,
    pub vision: Vec<(String, ViewIndex, EmbeddingVector)>,
}

fn vision_key(object_id: &str, view: ViewIndex) -> String {
    format!("{object_id}#{view}")
}

/// In-memory, read-only-after-build embedding lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    meta: StoreMeta,
    language: BTreeMap<String, EmbeddingVector>,
    vision: BTreeMap<(String, ViewIndex), EmbeddingVector>,
}

impl FeatureStore {
    pub fn new(meta: StoreMeta) -> Self {
        FeatureStore {
            meta,
            language: BTreeMap::new(),
            vision: BTreeMap::new(),
        }
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn dimension(&self) -> usize {
        self.meta.dimension
    }

    fn check_dim(&self, key: &str, v: &EmbeddingVector) -> Result<(), StoreError> {
        if v.dim() != self.meta.dimension {
            return Err(StoreError::DimensionMismatch {
                key: key.to_string(),
                expected: self.meta.dimension,
                actual: v.dim(),
            });
        }
        Ok(())
    }

    pub fn insert_language(
        &mut self,
        expr_id: impl Into<String>,
        v: EmbeddingVector,
    ) -> Result<(), StoreError> {
        let key = expr_id.into();
        self.check_dim(&key, &v)?;
        if self.language.contains_key(&key) {
            return Err(StoreError::DuplicateKey(key));
        }
        self.language.insert(key, v);
        Ok(())
    }

    pub fn insert_view(
        &mut self,
        object_id: impl Into<String>,
        view: ViewIndex,
        v: EmbeddingVector,
    ) -> Result<(), StoreError> {
        let object_id = object_id.into();
        self.check_dim(&vision_key(&object_id, view), &v)?;
        let key = (object_id, view);
        if self.vision.contains_key(&key) {
            return Err(StoreError::DuplicateKey(vision_key(&key.0, view)));
        }
        self.vision.insert(key, v);
        Ok(())
    }

    pub fn lookup_language(&self, expr_id: &str) -> Result<&EmbeddingVector, StoreError> {
        self.language
            .get(expr_id)
            .ok_or_else(|| StoreError::MissingLanguage(expr_id.to_string()))
    }

    pub fn lookup_view(&self, object_id: &str, view: ViewIndex) -> Result<&EmbeddingVector, StoreError> {
        // BTreeMap<(String, _)> cannot be queried by (&str, _) without allocating.
        self.vision
            .get(&(object_id.to_string(), view))
            .ok_or_else(|| StoreError::MissingView {
                object_id: object_id.to_string(),
                view,
            })
    }

    pub fn language_len(&self) -> usize {
        self.language.len()
    }

    pub fn vision_len(&self) -> usize {
        self.vision.len()
    }

    /// Keys referenced by `instances` but absent from the store, deduplicated
    /// and in first-seen order.
    pub fn missing_keys(&self, instances: &[TaskInstance]) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut missing = Vec::new();
        for inst in instances {
            let e = &inst.expression.expr_id;
            if !self.language.contains_key(e) && seen.insert(format!("lang:{e}")) {
                missing.push(format!("language `{e}`"));
            }
            for obj in [&inst.object_a, &inst.object_b] {
                for view in ViewIndex::all() {
                    let key = (obj.object_id.clone(), view);
                    if !self.vision.contains_key(&key) && seen.insert(vision_key(&key.0, view)) {
                        missing.push(format!("view `{}` {view}", obj.object_id));
                    }
                }
            }
        }
        missing
    }

    /// Entries in key order.
    pub fn to_entries(&self) -> StoreEntries {
        StoreEntries {
            meta: self.meta.clone(),
            language: self
                .language
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            vision: self
                .vision
                .iter()
                .map(|((o, view), v)| (o.clone(), *view, v.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<u64, StoreError> {
        write_store(&self.to_entries(), path)
    }

    pub fn open(path: &Path) -> Result<FeatureStore, StoreError> {
        read_store(path)
    }
}

fn put_key(buf: &mut Vec<u8>, key: &str) -> Result<(), StoreError> {
    let len = u16::try_from(key.len()).map_err(|_| StoreError::KeyTooLong(key.to_string()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(key.as_bytes());
    Ok(())
}

fn put_vector(buf: &mut Vec<u8>, v: &EmbeddingVector) {
    for x in v.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes `entries`, validating keys and dimensions first.
pub fn encode_store(entries: &StoreEntries) -> Result<Vec<u8>, StoreError> {
    let meta = &entries.meta;
    let dim = u32::try_from(meta.dimension)
        .ok()
        .filter(|&d| d > 0)
        .ok_or_else(|| StoreError::InvalidHeader(format!("dimension {}", meta.dimension)))?;
    let check = |key: String, v: &EmbeddingVector| {
        if v.dim() != meta.dimension {
            Err(StoreError::DimensionMismatch {
                key,
                expected: meta.dimension,
                actual: v.dim(),
            })
        } else {
            Ok(())
        }
    };
    let mut seen = HashSet::new();
    for (k, v) in &entries.language {
        check(k.clone(), v)?;
        if !seen.insert(k.as_str()) {
            return Err(StoreError::DuplicateKey(k.clone()));
        }
    }
    let mut seen = HashSet::new();
    for (o, view, v) in &entries.vision {
        check(vision_key(o, *view), v)?;
        if !seen.insert((o.as_str(), *view)) {
            return Err(StoreError::DuplicateKey(vision_key(o, *view)));
        }
    }

    let record_bytes = 4 * meta.dimension;
    let mut buf = Vec::with_capacity(
        64 + (entries.language.len() + entries.vision.len()) * (record_bytes + 32),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.push(meta.normalized as u8);
    put_key(&mut buf, &meta.encoder)?;
    buf.extend_from_slice(&(entries.language.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(entries.vision.len() as u64).to_le_bytes());
    for (k, v) in &entries.language {
        put_key(&mut buf, k)?;
        put_vector(&mut buf, v);
    }
    for (o, view, v) in &entries.vision {
        put_key(&mut buf, o)?;
        buf.push(u8::from(*view));
        put_vector(&mut buf, v);
    }
    Ok(buf)
}

/// Writes a store file and returns the number of bytes written.
pub fn write_store(entries: &StoreEntries, path: &Path) -> Result<u64, StoreError> {
    let bytes = encode_store(entries)?;
    fs::write(path, &bytes).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).ok_or(StoreError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(StoreError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], StoreError> {
        Ok(self.take(N, what)?.try_into().expect("slice has length N"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, StoreError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn key(&mut self, what: &'static str) -> Result<String, StoreError> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| StoreError::InvalidUtf8)
    }

    fn vector(&mut self, dim: usize, key: impl Fn() -> String) -> Result<EmbeddingVector, StoreError> {
        let bytes = self.take(dim * 4, "vector")?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(key()));
        }
        Ok(EmbeddingVector(values))
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<FeatureStore, StoreError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| StoreError::BadMagic)? != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dimension = c.u32("dimension")? as usize;
    if dimension == 0 {
        return Err(StoreError::InvalidHeader("dimension 0".into()));
    }
    let normalized = match c.u8("normalization flag")? {
        0 => false,
        1 => true,
        other => return Err(StoreError::InvalidHeader(format!("normalization flag {other}"))),
    };
    let encoder = c.key("encoder name")?;
    let n_lang = c.u64("language count")?;
    let n_vis = c.u64("vision count")?;

    let mut store = FeatureStore::new(StoreMeta {
        encoder,
        dimension,
        normalized,
    });
    for _ in 0..n_lang {
        let key = c.key("language key")?;
        let v = c.vector(dimension, || key.clone())?;
        store.insert_language(key, v)?;
    }
    for _ in 0..n_vis {
        let object_id = c.key("vision key")?;
        let raw = c.u8("view index")?;
        let view = ViewIndex::try_from(raw).map_err(|_| StoreError::InvalidView(raw))?;
        let v = c.vector(dimension, || vision_key(&object_id, view))?;
        store.insert_view(object_id, view, v)?;
    }
    if c.pos != bytes.len() {
        return Err(StoreError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(store)
}

pub fn read_store(path: &Path) -> Result<FeatureStore, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_store(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn view(i: usize) -> ViewIndex {
        ViewIndex::new(i).unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let mut x = vec![0.0f32; 512];
        x[0] = 3.0;
        x[1] = 4.0;
        let n = normalize(&v(&x)).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-7);
        assert!(n.as_slice()[2..].iter().all(|&c| c == 0.0));
        let again = normalize(&n).unwrap();
        for (a, b) in again.as_slice().iter().zip(n.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(
            normalize(&EmbeddingVector::zeros(4)),
            Err(StoreError::Degenerate)
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f32::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![f32::INFINITY]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn lookup_semantics() {
        let mut s = FeatureStore::new(StoreMeta::new("test", 2));
        s.insert_view("obj1", view(3), v(&[1.0, 2.0])).unwrap();
        assert_eq!(s.lookup_view("obj1", view(3)).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(s.lookup_view("obj1", view(3)).unwrap(), s.lookup_view("obj1", view(3)).unwrap());
        let err = s.lookup_view("obj9", view(0)).unwrap_err();
        assert!(err.to_string().contains("obj9"), "{err}");
        assert!(matches!(
            s.insert_view("obj1", view(3), v(&[0.0, 1.0])),
            Err(StoreError::DuplicateKey(_))
        ));
        assert!(matches!(
            s.insert_language("e", v(&[0.0, 1.0, 2.0])),
            Err(StoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn header_layout_is_exact() {
        let entries = StoreEntries {
            meta: StoreMeta::new("enc", 1),
            language: vec![("ab".into(), v(&[1.0]))],
            vision: vec![("o".into(), view(5), v(&[-2.0]))],
        };
        let bytes = encode_store(&entries).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"SNRF");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&3u16.to_le_bytes());
        expected.extend_from_slice(b"enc");
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(b"o");
        expected.push(5);
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn encode_rejects_duplicates_and_mismatches() {
        let dup = StoreEntries {
            meta: StoreMeta::new("enc", 1),
            language: vec![("a".into(), v(&[1.0])), ("a".into(), v(&[2.0]))],
            vision: vec![],
        };
        assert!(matches!(encode_store(&dup), Err(StoreError::DuplicateKey(k)) if k == "a"));
        let dup_view = StoreEntries {
            meta: StoreMeta::new("enc", 1),
            language: vec![],
            vision: vec![("o".into(), view(1), v(&[1.0])), ("o".into(), view(1), v(&[1.0]))],
        };
        assert!(matches!(encode_store(&dup_view), Err(StoreError::DuplicateKey(_))));
        let bad_dim = StoreEntries {
            meta: StoreMeta::new("enc", 2),
            language: vec![("a".into(), v(&[1.0]))],
            vision: vec![],
        };
        assert!(matches!(encode_store(&bad_dim), Err(StoreError::DimensionMismatch { .. })));
    }

    #[test]
    fn decode_rejects_damage() {
        let entries = StoreEntries {
            meta: StoreMeta::new("enc", 2),
            language: vec![("a".into(), v(&[1.0, 2.0]))],
            vision: vec![],
        };
        let bytes = encode_store(&entries).unwrap();
        assert!(matches!(decode_store(&bytes[..bytes.len() - 1]), Err(StoreError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_store(&extra), Err(StoreError::TrailingBytes(1))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_store(&bad), Err(StoreError::BadMagic)));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_store(&nan), Err(StoreError::NonFinite(_))));
    }
}
