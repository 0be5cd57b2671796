//! Accuracy reports with visual/blindfolded breakdown, the per-instance
//! prediction log, and match-score change under rotation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Candidate, Mode, TaskInstance, ViewIndex};
use crate::grounding::{
    select_views, GroundingError, ReferentScorer, ViewMode, ViewSelection, ViewSet,
};
use crate::heads::MatchHead;
use crate::store::{EmbeddingVector, FeatureStore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("view mode `{0}` samples views and needs a seed")]
    SeedRequired(ViewMode),
    #[error("missing embeddings: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Skip instances with missing embeddings instead of aborting.
    pub skip_missing: bool,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

/// Rounds a percentage to one decimal.
pub fn percent_1dp(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1000.0 * correct as f64 / total as f64).round() / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub correct: usize,
    pub total: usize,
    /// Percent, one decimal.
    pub accuracy: f64,
}

impl SubsetAccuracy {
    pub fn new(correct: usize, total: usize) -> Self {
        SubsetAccuracy {
            correct,
            total,
            accuracy: percent_1dp(correct, total),
        }
    }

    /// Unrounded fraction correct (0 on an empty subset).
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub views: ViewMode,
    pub fold: String,
    pub overall: SubsetAccuracy,
    pub visual: SubsetAccuracy,
    pub blindfolded: SubsetAccuracy,
    pub ties: usize,
    pub skipped: Vec<String>,
    /// Seed of the per-instance view selection (absent for all-view runs).
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub mode: Mode,
    pub score_a: f64,
    pub score_b: f64,
    pub choice: Candidate,
    pub gold: Candidate,
    pub correct: bool,
    pub tie: bool,
    pub views_a: ViewSet,
    pub views_b: ViewSet,
    /// Estimated ring position of each selected view of A then B, when the
    /// scorer has a view head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_estimates: Option<Vec<ViewIndex>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub log: Vec<PredictionRecord>,
}

impl Evaluation {
    pub fn log_jsonl(&self) -> String {
        to_jsonl(&self.log)
    }
}

pub(crate) fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn predict_one(
    scorer: &dyn ReferentScorer,
    inst: &TaskInstance,
    store: &FeatureStore,
    mode: ViewMode,
    seed: u64,
) -> Result<PredictionRecord, GroundingError> {
    let selection = ViewSelection::for_key(mode, seed, &inst.instance_id);
    let language = store.lookup_language(&inst.expression.expr_id)?;
    let views_a = select_views(store, &inst.object_a.object_id, selection.a)?;
    let views_b = select_views(store, &inst.object_b.object_id, selection.b)?;
    let p = scorer.predict(language, &views_a, &views_b)?;
    let mut estimates = Vec::new();
    for v in views_a.iter().chain(&views_b) {
        match scorer.estimate_view(v)? {
            Some(e) => estimates.push(e),
            None => break,
        }
    }
    Ok(PredictionRecord {
        instance_id: inst.instance_id.clone(),
        mode: inst.expression.mode,
        score_a: p.score_a,
        score_b: p.score_b,
        choice: p.choice,
        gold: inst.gold,
        correct: p.choice == inst.gold,
        tie: p.tie,
        views_a: selection.a,
        views_b: selection.b,
        view_estimates: (!estimates.is_empty()).then_some(estimates),
    })
}

/// Scores every instance and assembles the report. View selection for each
/// instance depends only on `(seed, instance_id)`, so results do not depend
/// on instance order or worker count.
pub fn evaluate(
    scorer: &dyn ReferentScorer,
    instances: &[TaskInstance],
    store: &FeatureStore,
    mode: ViewMode,
    seed: Option<u64>,
    fold: &str,
    options: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    let seed = match (mode.is_stochastic(), seed) {
        (true, None) => return Err(EvalError::SeedRequired(mode)),
        (true, Some(s)) => Some(s),
        (false, _) => None,
    };

    let mut kept = Vec::with_capacity(instances.len());
    let mut skipped = Vec::new();
    let mut missing = Vec::new();
    for inst in instances {
        let m = store.missing_keys(std::slice::from_ref(inst));
        if m.is_empty() {
            kept.push(inst);
        } else if options.skip_missing {
            log::warn!("skipping {}: {}", inst.instance_id, m.join(", "));
            skipped.push(inst.instance_id.clone());
        } else {
            for k in m {
                if !missing.contains(&k) {
                    missing.push(k);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingEmbeddings(missing));
    }

    let run = || -> Result<Vec<PredictionRecord>, GroundingError> {
        kept.par_iter()
            .map(|inst| predict_one(scorer, inst, store, mode, seed.unwrap_or(0)))
            .collect()
    };
    let log = match options.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let report = summarize(&scorer.name(), mode, fold, seed, &log, skipped);
    Ok(Evaluation { report, log })
}

/// Builds the report from a prediction log.
pub fn summarize(
    model: &str,
    views: ViewMode,
    fold: &str,
    seed: Option<u64>,
    log: &[PredictionRecord],
    skipped: Vec<String>,
) -> EvaluationReport {
    let count = |mode: Option<Mode>| {
        let rows = log.iter().filter(|r| mode.is_none_or(|m| r.mode == m));
        let (mut correct, mut total) = (0, 0);
        for r in rows {
            total += 1;
            correct += r.correct as usize;
        }
        SubsetAccuracy::new(correct, total)
    };
    EvaluationReport {
        model: model.to_string(),
        views,
        fold: fold.to_string(),
        overall: count(None),
        visual: count(Some(Mode::Visual)),
        blindfolded: count(Some(Mode::Blindfolded)),
        ties: log.iter().filter(|r| r.tie).count(),
        skipped,
        seed,
    }
}

/// Reports laid out as model / views / visual / blind / all rows.
pub fn render_table(reports: &[EvaluationReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:<7} {:<6} {:>7} {:>7} {:>7} {:>6} {:>5}",
        "Model", "Views", "Fold", "Visual", "Blind", "All", "N", "Ties"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<8} {:<7} {:<6} {:>7.1} {:>7.1} {:>7.1} {:>6} {:>5}",
            r.model,
            r.views.label(),
            r.fold,
            r.visual.accuracy,
            r.blindfolded.accuracy,
            r.overall.accuracy,
            r.overall.total,
            r.ties
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationDelta {
    pub score_before: f64,
    pub score_after: f64,
    pub delta: f64,
    /// `100 * delta / |score_before|`; absent when the baseline is zero.
    pub percent: Option<f64>,
}

impl RotationDelta {
    pub fn from_scores(score_before: f64, score_after: f64) -> Self {
        let delta = score_after - score_before;
        RotationDelta {
            score_before,
            score_after,
            delta,
            percent: (score_before != 0.0).then(|| 100.0 * delta / score_before.abs()),
        }
    }
}

/// Change of the match score when the view of one object is swapped for
/// another view of the ring.
pub fn rotation_score_delta(
    head: &MatchHead,
    language: &EmbeddingVector,
    view_before: &EmbeddingVector,
    view_after: &EmbeddingVector,
) -> Result<RotationDelta, GroundingError> {
    let before = head.score(language.as_slice(), view_before.as_slice())?;
    let after = head.score(language.as_slice(), view_after.as_slice())?;
    Ok(RotationDelta::from_scores(before, after))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRecord {
    pub instance_id: String,
    pub object_id: String,
    pub view_before: ViewIndex,
    pub view_after: ViewIndex,
    #[serde(flatten)]
    pub delta: RotationDelta,
}

/// Rotation deltas of each instance's gold object for every start view,
/// rotating by `steps` positions around the ring.
pub fn rotation_report(
    head: &MatchHead,
    instances: &[TaskInstance],
    store: &FeatureStore,
    steps: i64,
) -> Result<Vec<RotationRecord>, GroundingError> {
    let mut out = Vec::with_capacity(instances.len() * 8);
    for inst in instances {
        let language = store.lookup_language(&inst.expression.expr_id)?;
        let object = inst.object(inst.gold);
        for before in ViewIndex::all() {
            let after = before.rotate(steps);
            let delta = rotation_score_delta(
                head,
                language,
                store.lookup_view(&object.object_id, before)?,
                store.lookup_view(&object.object_id, after)?,
            )?;
            out.push(RotationRecord {
                instance_id: inst.instance_id.clone(),
                object_id: object.object_id.clone(),
                view_before: before,
                view_after: after,
                delta,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObjectEntry, ReferringExpression};
    use crate::grounding::Prediction;
    use crate::store::StoreMeta;
    use std::sync::Arc;

    struct AlwaysA;

    impl ReferentScorer for AlwaysA {
        fn name(&self) -> String {
            "A".into()
        }
        fn predict(
            &self,
            _: &EmbeddingVector,
            _: &[EmbeddingVector],
            _: &[EmbeddingVector],
        ) -> Result<Prediction, GroundingError> {
            Ok(Prediction::from_scores(1.0, 0.0))
        }
    }

    fn fixture(n: usize) -> (Vec<TaskInstance>, FeatureStore) {
        let mut store = FeatureStore::new(StoreMeta::new("test", 2));
        let a = Arc::new(ObjectEntry::with_default_views("a", "c"));
        let b = Arc::new(ObjectEntry::with_default_views("b", "c"));
        for o in ["a", "b"] {
            for v in ViewIndex::all() {
                store
                    .insert_view(o, v, EmbeddingVector::new(vec![1.0, v.get() as f32]).unwrap())
                    .unwrap();
            }
        }
        let mut out = Vec::new();
        for i in 0..n {
            let mode = if i % 3 == 0 { Mode::Blindfolded } else { Mode::Visual };
            let e = ReferringExpression::new(format!("e{i}"), "a thing", mode).unwrap();
            store
                .insert_language(&e.expr_id, EmbeddingVector::new(vec![1.0, 0.0]).unwrap())
                .unwrap();
            let gold = if i % 2 == 0 { Candidate::A } else { Candidate::B };
            out.push(TaskInstance::new(format!("i{i}"), e, a.clone(), b.clone(), gold).unwrap());
        }
        (out, store)
    }

    #[test]
    fn always_a_on_even_split_is_fifty_percent() {
        let (insts, store) = fixture(10);
        let e = evaluate(&AlwaysA, &insts, &store, ViewMode::All8, None, "val", &EvalOptions::default())
            .unwrap();
        assert_eq!(e.report.overall.accuracy, 50.0);
        assert_eq!(
            e.report.visual.total + e.report.blindfolded.total,
            e.report.overall.total
        );
        assert_eq!(e.report.seed, None);
    }

    #[test]
    fn stochastic_modes_need_a_seed() {
        let (insts, store) = fixture(2);
        for mode in [ViewMode::Single, ViewMode::Two] {
            assert!(matches!(
                evaluate(&AlwaysA, &insts, &store, mode, None, "val", &EvalOptions::default()),
                Err(EvalError::SeedRequired(_))
            ));
        }
    }

    #[test]
    fn missing_embedding_aborts_unless_skipping() {
        let (mut insts, store) = fixture(3);
        let e = ReferringExpression::new("unknown", "x", Mode::Visual).unwrap();
        let extra = TaskInstance::new("i-x", e, insts[0].object_a.clone(), insts[0].object_b.clone(), Candidate::A)
            .unwrap();
        insts.push(extra);
        let err = evaluate(&AlwaysA, &insts, &store, ViewMode::All8, None, "val", &EvalOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("unknown"), "{err}");
        let opts = EvalOptions {
            skip_missing: true,
            ..EvalOptions::default()
        };
        let e = evaluate(&AlwaysA, &insts, &store, ViewMode::All8, None, "val", &opts).unwrap();
        assert_eq!(e.report.skipped, vec!["i-x".to_string()]);
        assert_eq!(e.report.overall.total, 3);
    }

    #[test]
    fn rotation_delta_examples() {
        let d = RotationDelta::from_scores(1.0, 3.0);
        assert_eq!(d.percent, Some(200.0));
        assert_eq!(RotationDelta::from_scores(-2.0, -1.0).percent, Some(50.0));
        let z = RotationDelta::from_scores(0.0, 0.5);
        assert_eq!(z.percent, None);
        assert_eq!(z.delta, 0.5);
        assert_eq!(RotationDelta::from_scores(0.7, 0.7).percent, Some(0.0));
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent_1dp(2, 3), 66.7);
        assert_eq!(percent_1dp(0, 0), 0.0);
        assert_eq!(percent_1dp(7, 7), 100.0);
    }

    #[test]
    fn table_has_one_row_per_report() {
        let (insts, store) = fixture(4);
        let e = evaluate(&AlwaysA, &insts, &store, ViewMode::Single, Some(1), "val", &EvalOptions::default())
            .unwrap();
        let t = render_table(&[e.report.clone(), e.report]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("Single"));
    }
}
