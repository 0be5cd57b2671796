//! Category fold splitting by word-vector similarity and classification of
//! object pairs into pair folds.
//!
//! Splitting: each fold starts from the unit vectors of its anchor words.
//! Categories whose descriptor is itself an anchor are pinned to that fold
//! first; the rest are visited in descending object count (then name) and
//! go to the non-full fold whose centroid (sum of unit vectors) has the
//! highest cosine with the descriptor vector. A fold is full once its
//! object count reaches `ceil(proportion * total objects)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::vectors::{cosine, WordVectorTable};
use super::ToolError;
use crate::data::{Fold, FoldAssignment, FoldTable, PairFold, TaskInstance};

/// Splits a category name into camel-case tokens after dropping digits and
/// separators: `"2Shelves"` gives `["Shelves"]`, `"DiningTable"` gives
/// `["Dining", "Table"]`.
pub fn camel_tokens(name: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in name.chars() {
        if c.is_ascii_digit() {
            continue;
        }
        if !c.is_alphanumeric() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            continue;
        }
        if c.is_uppercase() && current.chars().last().is_some_and(|p| p.is_lowercase()) {
            tokens.push(std::mem::take(&mut current));
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Default descriptor word: last camel-case token, lowercased, digits
/// stripped. Falls back to the lowercased name when nothing remains.
pub fn descriptor_for(category: &str) -> String {
    camel_tokens(category)
        .last()
        .map(|t| t.to_lowercase())
        .unwrap_or_else(|| category.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryInput {
    pub category: String,
    pub descriptor: String,
    pub object_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Seed words per fold.
    pub anchors: BTreeMap<Fold, Vec<String>>,
    /// Target share of objects per fold; normalized to sum to 1.
    pub proportions: BTreeMap<Fold, f64>,
}

impl SplitConfig {
    fn validate(&self) -> Result<(), ToolError> {
        if self.anchors.is_empty() {
            return Err(ToolError::Config("no anchors".into()));
        }
        for fold in self.anchors.keys() {
            match self.proportions.get(fold) {
                Some(p) if p.is_finite() && *p > 0.0 => {}
                _ => {
                    return Err(ToolError::Config(format!(
                        "fold `{}` needs a positive proportion",
                        fold.as_str()
                    )))
                }
            }
        }
        if let Some(f) = self.proportions.keys().find(|f| !self.anchors.contains_key(f)) {
            return Err(ToolError::Config(format!("fold `{}` has no anchors", f.as_str())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub assignments: Vec<FoldAssignment>,
    pub warnings: Vec<String>,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Descriptor vector, else the mean of the category-name tokens' vectors.
fn category_vector(c: &CategoryInput, vectors: &WordVectorTable) -> Option<Vec<f64>> {
    if let Some(v) = vectors.get(&c.descriptor) {
        return Some(to_f64(v));
    }
    let found: Vec<Vec<f64>> = camel_tokens(&c.category)
        .iter()
        .filter_map(|t| vectors.get(t).map(to_f64))
        .collect();
    if found.is_empty() {
        return None;
    }
    let mut mean = vec![0.0; vectors.dim()];
    for v in &found {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / found.len() as f64);
    }
    Some(mean)
}

pub fn split_folds(
    categories: &[CategoryInput],
    vectors: &WordVectorTable,
    config: &SplitConfig,
) -> Result<SplitOutcome, ToolError> {
    config.validate()?;
    let mut seen = BTreeSet::new();
    for c in categories {
        if !seen.insert(c.category.as_str()) {
            return Err(ToolError::Config(format!("category `{}` listed twice", c.category)));
        }
    }

    let folds: Vec<Fold> = config.anchors.keys().copied().collect();
    let total_share: f64 = folds.iter().map(|f| config.proportions[f]).sum();
    let total_objects: usize = categories.iter().map(|c| c.object_count).sum();
    let capacity: BTreeMap<Fold, usize> = folds
        .iter()
        .map(|f| {
            let share = config.proportions[f] / total_share;
            (*f, (share * total_objects as f64).ceil() as usize)
        })
        .collect();

    let mut centroid: BTreeMap<Fold, Vec<f64>> = BTreeMap::new();
    let mut anchor_fold: BTreeMap<String, Fold> = BTreeMap::new();
    for (fold, words) in &config.anchors {
        let mut sum = vec![0.0; vectors.dim()];
        let mut any = false;
        for w in words {
            anchor_fold.entry(w.to_lowercase()).or_insert(*fold);
            if let Some(u) = vectors.get(w).and_then(|v| unit(&to_f64(v))) {
                sum.iter_mut().zip(&u).for_each(|(s, x)| *s += x);
                any = true;
            }
        }
        if !any {
            return Err(ToolError::NoAnchor(fold.as_str().to_string()));
        }
        centroid.insert(*fold, sum);
    }

    let mut load: BTreeMap<Fold, usize> = folds.iter().map(|f| (*f, 0)).collect();
    let mut assigned: BTreeMap<String, Fold> = BTreeMap::new();
    let mut warnings = Vec::new();

    let mut order: Vec<&CategoryInput> = categories.iter().collect();
    order.sort_by(|a, b| {
        let pinned = |c: &CategoryInput| anchor_fold.contains_key(&c.descriptor.to_lowercase());
        pinned(b)
            .cmp(&pinned(a))
            .then(b.object_count.cmp(&a.object_count))
            .then(a.category.cmp(&b.category))
    });

    for c in order {
        let vector = category_vector(c, vectors).and_then(|v| unit(&v));
        let open: Vec<Fold> = folds
            .iter()
            .copied()
            .filter(|f| load[f] < capacity[f])
            .collect();
        let fold = if let Some(f) = anchor_fold.get(&c.descriptor.to_lowercase()) {
            *f
        } else if let Some(v) = &vector {
            // Ties go to the earlier fold in Train, Val, Test order.
            open.iter()
                .copied()
                .map(|f| (f, cosine(v, &centroid[&f])))
                .fold(None, |best: Option<(Fold, f64)>, (f, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((f, s)),
                })
                .map(|(f, _)| f)
                .expect("some fold has room")
        } else {
            warnings.push(format!(
                "category `{}`: no vector for `{}` or its name tokens, placed by size",
                c.category, c.descriptor
            ));
            open.iter()
                .copied()
                .max_by(|a, b| {
                    let room = |f: &Fold| capacity[f] as f64 - load[f] as f64;
                    room(a).total_cmp(&room(b)).then(b.cmp(a))
                })
                .expect("some fold has room")
        };
        if let Some(v) = &vector {
            centroid
                .get_mut(&fold)
                .expect("fold has a centroid")
                .iter_mut()
                .zip(v)
                .for_each(|(s, x)| *s += x);
        }
        *load.get_mut(&fold).expect("known fold") += c.object_count;
        assigned.insert(c.category.clone(), fold);
    }

    Ok(SplitOutcome {
        assignments: assigned
            .into_iter()
            .map(|(category, fold)| FoldAssignment { category, fold })
            .collect(),
        warnings,
    })
}

/// One unordered object pair with the number of expressions collected on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectPair {
    pub object_a: String,
    pub category_a: String,
    pub object_b: String,
    pub category_b: String,
    pub expressions: usize,
}

/// Groups instances by unordered object pair, in first-seen order.
pub fn pairs_from_instances(instances: &[TaskInstance]) -> Vec<ObjectPair> {
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut pairs: Vec<ObjectPair> = Vec::new();
    for inst in instances {
        let (a, b) = (&inst.object_a, &inst.object_b);
        let (first, second) = if a.object_id <= b.object_id { (a, b) } else { (b, a) };
        let key = (first.object_id.clone(), second.object_id.clone());
        match index.get(&key) {
            Some(&i) => pairs[i].expressions += 1,
            None => {
                index.insert(key, pairs.len());
                pairs.push(ObjectPair {
                    object_a: first.object_id.clone(),
                    category_a: first.category.clone(),
                    object_b: second.object_id.clone(),
                    category_b: second.category.clone(),
                    expressions: 1,
                });
            }
        }
    }
    pairs
}

/// Where a pair may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairUsability {
    Train,
    Val,
    Test,
    /// Only for training a model that is evaluated on the test fold.
    TestTraining,
    Excluded,
}

impl PairUsability {
    pub fn of(fold: PairFold) -> Self {
        match fold {
            PairFold::TrainTrain => PairUsability::Train,
            PairFold::ValVal => PairUsability::Val,
            PairFold::TestTest => PairUsability::Test,
            PairFold::TrainVal => PairUsability::TestTraining,
            PairFold::TestCross => PairUsability::Excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: PairFold,
    pub label: String,
    pub pairs: usize,
    /// Distinct categories; absent for cross-fold rows, whose pairs are all
    /// cross-category.
    pub categories: Option<usize>,
    pub objects: usize,
    pub expressions: usize,
    /// Share of the expressions in the uniform folds, rounded to one
    /// decimal (two below 1%). Absent for excluded pairs.
    pub percent: Option<f64>,
    pub usability: PairUsability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFoldReport {
    pub rows: Vec<FoldRow>,
    pub total_pairs: usize,
    pub total_expressions: usize,
    /// Expressions in the Train-Train, Val-Val and Test-Test rows.
    pub uniform_expressions: usize,
}

impl PairFoldReport {
    pub fn row(&self, fold: PairFold) -> &FoldRow {
        self.rows.iter().find(|r| r.fold == fold).expect("every pair fold has a row")
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<12} {:>7} {:>11} {:>8} {:>12} {:>9}\n",
            "Pair fold", "Pairs", "Categories", "Objects", "Expressions", "% size"
        );
        for r in &self.rows {
            let cats = r.categories.map_or("-".to_string(), |c| c.to_string());
            let pct = match r.percent {
                Some(p) if p < 1.0 => format!("{p:.2}"),
                Some(p) => format!("{p:.1}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<12} {:>7} {:>11} {:>8} {:>12} {:>9}\n",
                r.label, r.pairs, cats, r.objects, r.expressions, pct
            ));
        }
        out
    }
}

/// One decimal, or two when below 1.
pub fn table_percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        return 0.0;
    }
    let p = 100.0 * part as f64 / whole as f64;
    let scale = if p < 1.0 { 100.0 } else { 10.0 };
    (p * scale).round() / scale
}

pub fn classify_pairs(
    pairs: &[ObjectPair],
    folds: &FoldTable,
) -> Result<(PairFoldReport, Vec<PairUsability>), ToolError> {
    #[derive(Default)]
    struct Acc {
        pairs: usize,
        categories: BTreeSet<String>,
        objects: BTreeSet<String>,
        expressions: usize,
    }
    let mut acc: BTreeMap<PairFold, Acc> = BTreeMap::new();
    let mut flags = Vec::with_capacity(pairs.len());
    for p in pairs {
        let fa = folds
            .fold_of(&p.category_a)
            .ok_or_else(|| ToolError::Unassigned(p.category_a.clone()))?;
        let fb = folds
            .fold_of(&p.category_b)
            .ok_or_else(|| ToolError::Unassigned(p.category_b.clone()))?;
        let pf = PairFold::from_folds(fa, fb);
        let a = acc.entry(pf).or_default();
        a.pairs += 1;
        a.categories.insert(p.category_a.clone());
        a.categories.insert(p.category_b.clone());
        a.objects.insert(p.object_a.clone());
        a.objects.insert(p.object_b.clone());
        a.expressions += p.expressions;
        flags.push(PairUsability::of(pf));
    }
    let uniform_expressions: usize = PairFold::ALL
        .iter()
        .filter(|f| f.uniform().is_some())
        .map(|f| acc.get(f).map_or(0, |a| a.expressions))
        .sum();
    let rows = PairFold::ALL
        .iter()
        .map(|&fold| {
            let a = acc.remove(&fold).unwrap_or_default();
            let usability = PairUsability::of(fold);
            FoldRow {
                fold,
                label: fold.label().to_string(),
                pairs: a.pairs,
                categories: fold.uniform().map(|_| a.categories.len()),
                objects: a.objects.len(),
                expressions: a.expressions,
                percent: (usability != PairUsability::Excluded)
                    .then(|| table_percent(a.expressions, uniform_expressions)),
                usability,
            }
        })
        .collect();
    Ok((
        PairFoldReport {
            rows,
            total_pairs: pairs.len(),
            total_expressions: pairs.iter().map(|p| p.expressions).sum(),
            uniform_expressions,
        },
        flags,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_heuristics() {
        assert_eq!(descriptor_for("2Shelves"), "shelves");
        assert_eq!(descriptor_for("DiningTable"), "table");
        assert_eq!(descriptor_for("bed"), "bed");
        assert_eq!(descriptor_for("TV_Stand3"), "stand");
        assert_eq!(descriptor_for("42"), "42");
        assert_eq!(camel_tokens("AccentTable"), vec!["Accent", "Table"]);
    }

    fn vectors() -> WordVectorTable {
        WordVectorTable::from_pairs([
            ("shelves", vec![1.0, 0.1, 0.0]),
            ("shelf", vec![0.95, 0.15, 0.0]),
            ("bed", vec![0.0, 1.0, 0.1]),
            ("cot", vec![0.05, 0.9, 0.2]),
            ("lamp", vec![0.0, 0.1, 1.0]),
        ])
        .unwrap()
    }

    fn config(folds: &[(Fold, &str)]) -> SplitConfig {
        SplitConfig {
            anchors: folds.iter().map(|(f, w)| (*f, vec![w.to_string()])).collect(),
            proportions: folds.iter().map(|(f, _)| (*f, 1.0)).collect(),
        }
    }

    fn cat(name: &str, descriptor: &str, n: usize) -> CategoryInput {
        CategoryInput {
            category: name.into(),
            descriptor: descriptor.into(),
            object_count: n,
        }
    }

    #[test]
    fn near_synonyms_follow_their_anchor() {
        let cats = [cat("3Shelves", "shelves", 5), cat("Shelf", "shelf", 4), cat("Bed", "bed", 3), cat("Cot", "cot", 2)];
        let out = split_folds(&cats, &vectors(), &config(&[(Fold::Train, "shelves"), (Fold::Test, "bed")])).unwrap();
        let table = FoldTable::from_assignments(out.assignments).unwrap();
        assert_eq!(table.fold_of("Shelf"), Some(Fold::Train));
        assert_eq!(table.fold_of("3Shelves"), Some(Fold::Train));
        assert_eq!(table.fold_of("Cot"), Some(Fold::Test));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn single_fold_takes_everything() {
        let cats = [cat("Lamp", "lamp", 2)];
        let out = split_folds(&cats, &vectors(), &config(&[(Fold::Val, "bed")])).unwrap();
        assert_eq!(out.assignments[0].fold, Fold::Val);
    }

    #[test]
    fn unknown_words_fall_back() {
        let cats = [cat("BunkBed", "bunkbed", 2), cat("Zzz", "qqq", 1)];
        let out = split_folds(&cats, &vectors(), &config(&[(Fold::Train, "shelves"), (Fold::Test, "bed")])).unwrap();
        let table = FoldTable::from_assignments(out.assignments).unwrap();
        assert_eq!(table.fold_of("BunkBed"), Some(Fold::Test));
        assert!(table.fold_of("Zzz").is_some());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn anchor_without_vector_is_an_error() {
        let cats = [cat("Lamp", "lamp", 2)];
        let err = split_folds(&cats, &vectors(), &config(&[(Fold::Train, "nothing")])).unwrap_err();
        assert!(matches!(err, ToolError::NoAnchor(_)));
    }

    fn pair(a: (&str, &str), b: (&str, &str), n: usize) -> ObjectPair {
        ObjectPair {
            object_a: a.0.into(),
            category_a: a.1.into(),
            object_b: b.0.into(),
            category_b: b.1.into(),
            expressions: n,
        }
    }

    #[test]
    fn pair_rules() {
        let folds = FoldTable::from_assignments(vec![
            FoldAssignment { category: "tr".into(), fold: Fold::Train },
            FoldAssignment { category: "va".into(), fold: Fold::Val },
            FoldAssignment { category: "te".into(), fold: Fold::Test },
        ])
        .unwrap();
        let pairs = [
            pair(("o1", "tr"), ("o2", "tr"), 6),
            pair(("o3", "tr"), ("o4", "va"), 6),
            pair(("o5", "tr"), ("o6", "te"), 6),
            pair(("o7", "te"), ("o8", "te"), 6),
        ];
        let (report, flags) = classify_pairs(&pairs, &folds).unwrap();
        assert_eq!(
            flags,
            vec![
                PairUsability::Train,
                PairUsability::TestTraining,
                PairUsability::Excluded,
                PairUsability::Test
            ]
        );
        assert_eq!(report.rows.iter().map(|r| r.pairs).sum::<usize>(), report.total_pairs);
        assert_eq!(report.row(PairFold::TrainVal).categories, None);
        assert_eq!(report.row(PairFold::TestCross).percent, None);
        assert_eq!(report.row(PairFold::TrainTrain).percent, Some(50.0));
        let unassigned = [pair(("x", "nope"), ("y", "tr"), 1)];
        assert!(matches!(classify_pairs(&unassigned, &folds), Err(ToolError::Unassigned(_))));
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(table_percent(39104, 50159), 78.0);
        assert_eq!(table_percent(76, 50159), 0.15);
        assert_eq!(table_percent(0, 0), 0.0);
    }
}
