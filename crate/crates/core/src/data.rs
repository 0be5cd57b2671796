//! Domain model for objects, view rings, referring expressions and task
//! instances, plus ingestion of the line-delimited dataset manifest.
//!
//! A dataset directory holds `objects.jsonl` (the object table),
//! `instances.jsonl` (one benchmark row per line) and, optionally,
//! `folds.jsonl` (category to fold assignments). Every record is a JSON
//! object on its own line; blank lines are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of rendered viewpoints in an object's view ring.
pub const VIEW_COUNT: usize = 8;

pub const OBJECTS_FILE: &str = "objects.jsonl";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const FOLDS_FILE: &str = "folds.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{locator}: malformed record: {message}")]
    Malformed { locator: String, message: String },
    #[error("{locator}: instance references unknown object `{object_id}`")]
    DanglingReference { locator: String, object_id: String },
    #[error("{locator}: duplicate {kind} `{key}`")]
    Duplicate {
        locator: String,
        kind: &'static str,
        key: String,
    },
    #[error("view index {0} out of range 0..8")]
    InvalidView(usize),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Position on the closed ring of eight viewpoints, 45 degrees apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ViewIndex(u8);

impl ViewIndex {
    pub fn new(index: usize) -> Result<Self, DataError> {
        if index < VIEW_COUNT {
            Ok(ViewIndex(index as u8))
        } else {
            Err(DataError::InvalidView(index))
        }
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    pub fn successor(self) -> Self {
        self.rotate(1)
    }

    /// Rotates by `steps` positions (negative steps turn the other way).
    pub fn rotate(self, steps: i64) -> Self {
        let n = VIEW_COUNT as i64;
        ViewIndex(((self.0 as i64 + steps).rem_euclid(n)) as u8)
    }

    pub fn azimuth_degrees(self) -> f64 {
        45.0 * self.0 as f64
    }

    pub fn all() -> impl Iterator<Item = ViewIndex> {
        (0..VIEW_COUNT as u8).map(ViewIndex)
    }
}

impl TryFrom<u8> for ViewIndex {
    type Error = DataError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        ViewIndex::new(value as usize)
    }
}

impl From<ViewIndex> for u8 {
    fn from(v: ViewIndex) -> u8 {
        v.0
    }
}

impl fmt::Display for ViewIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Visual,
    Blindfolded,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Visual => "visual",
            Mode::Blindfolded => "blindfolded",
        }
    }
}

/// One of the two candidate objects of a task instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Candidate {
    A,
    B,
}

impl Candidate {
    pub fn other(self) -> Self {
        match self {
            Candidate::A => Candidate::B,
            Candidate::B => Candidate::A,
        }
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Candidate::A => "A",
            Candidate::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Train, Fold::Val, Fold::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        }
    }
}

impl FromStr for Fold {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Fold::Train),
            "val" | "valid" | "validation" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            other => Err(format!("unknown fold `{other}`")),
        }
    }
}

/// Fold of an object pair, derived from the folds of its two categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairFold {
    TrainTrain,
    ValVal,
    TestTest,
    /// Cross-category pair spanning train and validation. Usable only when
    /// training a final model for the test fold.
    TrainVal,
    /// Cross-category pair with exactly one category in test. Unusable.
    TestCross,
}

impl PairFold {
    pub const ALL: [PairFold; 5] = [
        PairFold::TrainTrain,
        PairFold::ValVal,
        PairFold::TrainVal,
        PairFold::TestTest,
        PairFold::TestCross,
    ];

    pub fn from_folds(a: Fold, b: Fold) -> PairFold {
        use Fold::*;
        match (a, b) {
            (Train, Train) => PairFold::TrainTrain,
            (Val, Val) => PairFold::ValVal,
            (Test, Test) => PairFold::TestTest,
            (Train, Val) | (Val, Train) => PairFold::TrainVal,
            _ => PairFold::TestCross,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PairFold::TrainTrain => "Train-Train",
            PairFold::ValVal => "Val-Val",
            PairFold::TestTest => "Test-Test",
            PairFold::TrainVal => "Train-Val",
            PairFold::TestCross => "Test-Cross",
        }
    }

    /// The uniform fold this pair fold corresponds to, if any.
    pub fn uniform(self) -> Option<Fold> {
        match self {
            PairFold::TrainTrain => Some(Fold::Train),
            PairFold::ValVal => Some(Fold::Val),
            PairFold::TestTest => Some(Fold::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectEntry {
    pub object_id: String,
    pub category: String,
    views: [String; VIEW_COUNT],
}

impl ObjectEntry {
    /// Builds an entry, rejecting duplicate or empty view keys.
    pub fn new(
        object_id: impl Into<String>,
        category: impl Into<String>,
        views: [String; VIEW_COUNT],
    ) -> Result<Self, String> {
        let object_id = object_id.into();
        if object_id.is_empty() {
            return Err("empty object_id".into());
        }
        let mut seen = HashSet::new();
        for key in &views {
            if key.is_empty() {
                return Err(format!("object `{object_id}` has an empty view key"));
            }
            if !seen.insert(key.as_str()) {
                return Err(format!("object `{object_id}` repeats view key `{key}`"));
            }
        }
        Ok(ObjectEntry {
            object_id,
            category: category.into(),
            views,
        })
    }

    /// Entry whose view keys follow the `<object_id>/<view>` naming.
    pub fn with_default_views(object_id: impl Into<String>, category: impl Into<String>) -> Self {
        let object_id = object_id.into();
        let views = std::array::from_fn(|i| format!("{object_id}/{i}"));
        ObjectEntry {
            object_id,
            category: category.into(),
            views,
        }
    }

    pub fn view_key(&self, view: ViewIndex) -> &str {
        &self.views[view.get()]
    }

    pub fn view_keys(&self) -> &[String; VIEW_COUNT] {
        &self.views
    }
}

/// Whitespace token count. Splits on Unicode whitespace, keeps punctuation.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferringExpression {
    pub expr_id: String,
    pub text: String,
    pub mode: Mode,
    pub token_count: usize,
}

impl ReferringExpression {
    pub fn new(
        expr_id: impl Into<String>,
        text: impl Into<String>,
        mode: Mode,
    ) -> Result<Self, String> {
        let text = text.into();
        let token_count = token_count(&text);
        if token_count == 0 {
            return Err("expression text has no tokens".into());
        }
        Ok(ReferringExpression {
            expr_id: expr_id.into(),
            text,
            mode,
            token_count,
        })
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub instance_id: String,
    pub expression: ReferringExpression,
    pub object_a: Arc<ObjectEntry>,
    pub object_b: Arc<ObjectEntry>,
    pub gold: Candidate,
}

impl TaskInstance {
    pub fn new(
        instance_id: impl Into<String>,
        expression: ReferringExpression,
        object_a: Arc<ObjectEntry>,
        object_b: Arc<ObjectEntry>,
        gold: Candidate,
    ) -> Result<Self, String> {
        if object_a.object_id == object_b.object_id {
            return Err(format!("object `{}` paired with itself", object_a.object_id));
        }
        Ok(TaskInstance {
            instance_id: instance_id.into(),
            expression,
            object_a,
            object_b,
            gold,
        })
    }

    pub fn object(&self, which: Candidate) -> &ObjectEntry {
        match which {
            Candidate::A => &self.object_a,
            Candidate::B => &self.object_b,
        }
    }

    /// Copy of this instance with A and B exchanged (gold follows its object).
    pub fn swapped(&self) -> TaskInstance {
        TaskInstance {
            instance_id: self.instance_id.clone(),
            expression: self.expression.clone(),
            object_a: Arc::clone(&self.object_b),
            object_b: Arc::clone(&self.object_a),
            gold: self.gold.other(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldAssignment {
    pub category: String,
    pub fold: Fold,
}

/// Category to fold map. Each category appears exactly once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FoldTable {
    folds: BTreeMap<String, Fold>,
}

impl FoldTable {
    pub fn from_assignments(
        assignments: impl IntoIterator<Item = FoldAssignment>,
    ) -> Result<Self, DataError> {
        let mut folds = BTreeMap::new();
        for (i, a) in assignments.into_iter().enumerate() {
            if folds.insert(a.category.clone(), a.fold).is_some() {
                return Err(DataError::Duplicate {
                    locator: format!("assignment {}", i + 1),
                    kind: "category",
                    key: a.category,
                });
            }
        }
        Ok(FoldTable { folds })
    }

    pub fn fold_of(&self, category: &str) -> Option<Fold> {
        self.folds.get(category).copied()
    }

    pub fn pair_fold(&self, category_a: &str, category_b: &str) -> Option<PairFold> {
        Some(PairFold::from_folds(
            self.fold_of(category_a)?,
            self.fold_of(category_b)?,
        ))
    }

    /// Assignments in category order.
    pub fn assignments(&self) -> Vec<FoldAssignment> {
        self.folds
            .iter()
            .map(|(category, &fold)| FoldAssignment {
                category: category.clone(),
                fold,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let records: Vec<(String, FoldAssignment)> = read_jsonl(path)?;
        FoldTable::from_assignments(records.into_iter().map(|(_, r)| r))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_jsonl(path, &self.assignments())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub expr_id: String,
    pub text: String,
    pub mode: Mode,
    pub object_a_id: String,
    pub object_b_id: String,
    pub gold: Candidate,
    pub category_a: String,
    pub category_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub object_id: String,
    pub category: String,
    pub view_key_0: String,
    pub view_key_1: String,
    pub view_key_2: String,
    pub view_key_3: String,
    pub view_key_4: String,
    pub view_key_5: String,
    pub view_key_6: String,
    pub view_key_7: String,
}

impl From<&ObjectEntry> for ObjectRecord {
    fn from(o: &ObjectEntry) -> Self {
        let [v0, v1, v2, v3, v4, v5, v6, v7] = o.views.clone();
        ObjectRecord {
            object_id: o.object_id.clone(),
            category: o.category.clone(),
            view_key_0: v0,
            view_key_1: v1,
            view_key_2: v2,
            view_key_3: v3,
            view_key_4: v4,
            view_key_5: v5,
            view_key_6: v6,
            view_key_7: v7,
        }
    }
}

impl From<&TaskInstance> for InstanceRecord {
    fn from(t: &TaskInstance) -> Self {
        InstanceRecord {
            instance_id: t.instance_id.clone(),
            expr_id: t.expression.expr_id.clone(),
            text: t.expression.text.clone(),
            mode: t.expression.mode,
            object_a_id: t.object_a.object_id.clone(),
            object_b_id: t.object_b.object_id.clone(),
            gold: t.gold,
            category_a: t.object_a.category.clone(),
            category_b: t.object_b.category.clone(),
        }
    }
}

/// A loaded benchmark: object table, instances, and optional fold table.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub objects: Vec<Arc<ObjectEntry>>,
    pub instances: Vec<TaskInstance>,
    pub folds: Option<FoldTable>,
}

impl Dataset {
    pub fn new(
        objects: Vec<Arc<ObjectEntry>>,
        instances: Vec<TaskInstance>,
        folds: Option<FoldTable>,
    ) -> Self {
        Dataset {
            objects,
            instances,
            folds,
        }
    }

    /// Instance counts keyed by pair fold label; `unassigned` when a
    /// category has no fold (or no fold table was loaded).
    pub fn fold_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(self.pair_fold_label(inst)).or_insert(0) += 1;
        }
        counts
    }

    fn pair_fold_label(&self, inst: &TaskInstance) -> String {
        self.pair_fold(inst)
            .map(|p| p.label().to_string())
            .unwrap_or_else(|| "unassigned".to_string())
    }

    pub fn pair_fold(&self, inst: &TaskInstance) -> Option<PairFold> {
        self.folds
            .as_ref()?
            .pair_fold(&inst.object_a.category, &inst.object_b.category)
    }

    /// Instances whose pair fold is one of `wanted`.
    pub fn select(&self, wanted: &[PairFold]) -> Vec<TaskInstance> {
        self.instances
            .iter()
            .filter(|i| self.pair_fold(i).is_some_and(|p| wanted.contains(&p)))
            .cloned()
            .collect()
    }

    pub fn object(&self, object_id: &str) -> Option<&Arc<ObjectEntry>> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    /// Writes the manifest files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let objects: Vec<ObjectRecord> = self.objects.iter().map(|o| o.as_ref().into()).collect();
        write_jsonl(&dir.join(OBJECTS_FILE), &objects)?;
        let instances: Vec<InstanceRecord> = self.instances.iter().map(Into::into).collect();
        write_jsonl(&dir.join(INSTANCES_FILE), &instances)?;
        if let Some(folds) = &self.folds {
            folds.save(&dir.join(FOLDS_FILE))?;
        }
        Ok(())
    }
}

/// Loads a dataset directory.
///
/// Every instance must reference objects in the object table, its recorded
/// categories must agree with the table, and an `expr_id` that appears more
/// than once must always carry the same text and mode.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let objects_path = dir.join(OBJECTS_FILE);
    let instances_path = dir.join(INSTANCES_FILE);
    for p in [&objects_path, &instances_path] {
        if !p.is_file() {
            return Err(DataError::MissingFile(p.clone()));
        }
    }

    let object_records: Vec<(String, ObjectRecord)> = read_jsonl(&objects_path)?;
    let mut objects = Vec::with_capacity(object_records.len());
    let mut by_id: HashMap<String, Arc<ObjectEntry>> = HashMap::new();
    for (locator, r) in object_records {
        let views = [
            r.view_key_0,
            r.view_key_1,
            r.view_key_2,
            r.view_key_3,
            r.view_key_4,
            r.view_key_5,
            r.view_key_6,
            r.view_key_7,
        ];
        let entry = ObjectEntry::new(r.object_id, r.category, views).map_err(|message| {
            DataError::Malformed {
                locator: locator.clone(),
                message,
            }
        })?;
        if by_id.contains_key(&entry.object_id) {
            return Err(DataError::Duplicate {
                locator,
                kind: "object_id",
                key: entry.object_id,
            });
        }
        let entry = Arc::new(entry);
        by_id.insert(entry.object_id.clone(), Arc::clone(&entry));
        objects.push(entry);
    }

    let instance_records: Vec<(String, InstanceRecord)> = read_jsonl(&instances_path)?;
    let mut instances = Vec::with_capacity(instance_records.len());
    let mut instance_ids = HashSet::new();
    let mut expressions: HashMap<String, (String, Mode)> = HashMap::new();
    for (locator, r) in instance_records {
        let malformed = |message: String| DataError::Malformed {
            locator: locator.clone(),
            message,
        };
        if !instance_ids.insert(r.instance_id.clone()) {
            return Err(DataError::Duplicate {
                locator,
                kind: "instance_id",
                key: r.instance_id,
            });
        }
        let lookup = |id: &str| {
            by_id.get(id).cloned().ok_or_else(|| DataError::DanglingReference {
                locator: locator.clone(),
                object_id: id.to_string(),
            })
        };
        let object_a = lookup(&r.object_a_id)?;
        let object_b = lookup(&r.object_b_id)?;
        for (recorded, object) in [(&r.category_a, &object_a), (&r.category_b, &object_b)] {
            if *recorded != object.category {
                return Err(malformed(format!(
                    "category `{recorded}` disagrees with object table category `{}` for `{}`",
                    object.category, object.object_id
                )));
            }
        }
        match expressions.get(&r.expr_id) {
            Some((text, mode)) if *text != r.text || *mode != r.mode => {
                return Err(malformed(format!(
                    "expr_id `{}` reused with different text or mode",
                    r.expr_id
                )));
            }
            Some(_) => {}
            None => {
                expressions.insert(r.expr_id.clone(), (r.text.clone(), r.mode));
            }
        }
        let expression = ReferringExpression::new(r.expr_id, r.text, r.mode).map_err(malformed)?;
        let inst = TaskInstance::new(r.instance_id, expression, object_a, object_b, r.gold)
            .map_err(malformed)?;
        instances.push(inst);
    }

    let folds_path = dir.join(FOLDS_FILE);
    let folds = if folds_path.is_file() {
        Some(FoldTable::load(&folds_path)?)
    } else {
        None
    };

    let dataset = Dataset {
        objects,
        instances,
        folds,
    };
    for (fold, count) in dataset.fold_counts() {
        log::info!("{}: {fold}: {count} instances", dir.display());
    }
    Ok(dataset)
}

/// Reads a JSON-lines file, returning each record with a `file:line` locator.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(String, T)>, DataError> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::io(path, e)
        }
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let locator = format!("{}:{}", path.display(), n + 1);
        let record = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            locator: locator.clone(),
            message: e.to_string(),
        })?;
        out.push((locator, record));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Count, mean and population standard deviation of token lengths.
/// Moments are `None` when the count is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthMoments {
    pub count: usize,
    pub tokens: usize,
    pub types: usize,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
}

impl LengthMoments {
    fn from_expressions<'a>(exprs: impl Iterator<Item = &'a ReferringExpression>) -> Self {
        let mut lengths = Vec::new();
        let mut types = HashSet::new();
        for e in exprs {
            lengths.push(e.token_count as f64);
            types.extend(e.tokens());
        }
        let count = lengths.len();
        let tokens = lengths.iter().sum::<f64>() as usize;
        let (mean, stddev) = if count == 0 {
            (None, None)
        } else {
            let mean = lengths.iter().sum::<f64>() / count as f64;
            let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / count as f64;
            (Some(mean), Some(var.sqrt()))
        };
        LengthMoments {
            count,
            tokens,
            types: types.len(),
            mean,
            stddev,
        }
    }
}

/// Expression-length statistics overall and per annotation mode.
///
/// `types` counts distinct whitespace tokens (case-sensitive), reported next
/// to the token totals so both are visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStatistics {
    pub instances: usize,
    pub overall: LengthMoments,
    pub visual: LengthMoments,
    pub blindfolded: LengthMoments,
}

pub fn instance_statistics(instances: &[TaskInstance]) -> InstanceStatistics {
    let exprs = || instances.iter().map(|i| &i.expression);
    InstanceStatistics {
        instances: instances.len(),
        overall: LengthMoments::from_expressions(exprs()),
        visual: LengthMoments::from_expressions(exprs().filter(|e| e.mode == Mode::Visual)),
        blindfolded: LengthMoments::from_expressions(
            exprs().filter(|e| e.mode == Mode::Blindfolded),
        ),
    }
}
