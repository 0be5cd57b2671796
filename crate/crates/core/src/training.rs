//! Training loops for the match head (pairwise multiple-choice loss) and
//! for LaGOR (match loss plus view-estimation loss on each sampled view).
//!
//! Every step draws from one seeded stream: the epoch shuffle first, then
//! the view selection of each instance in batch order. Gradients are summed
//! in batch order, so identical inputs give bitwise-identical parameters.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Candidate, TaskInstance, ViewIndex, VIEW_COUNT};
use crate::evaluation::{evaluate, EvalOptions};
use crate::grounding::{
    aggregate_views, derive_seed, select_views, GroundingError, MatchScorer, ViewMode,
    ViewSelection,
};
use crate::heads::{
    adam_step, AdamConfig, ForwardCache, Gradients, HeadError, MatchHead, OptimizerState,
    ViewHead, MATCH_HIDDEN, VIEW_HIDDEN,
};
use crate::store::{FeatureStore, StoreError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("missing embeddings: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),
    #[error("no training instances")]
    NoInstances,
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Loss applied to the two candidate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    /// Softmax over the pair against the gold index.
    MultipleChoice,
    /// Independent sigmoid per candidate (gold = 1, distractor = 0), averaged.
    Binary,
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_view_weight() -> f64 {
    1.0
}
fn default_match_weight() -> f64 {
    0.2
}
fn default_loss_form() -> LossForm {
    LossForm::MultipleChoice
}
fn default_true() -> bool {
    true
}
fn default_match_hidden() -> Vec<usize> {
    MATCH_HIDDEN.to_vec()
}
fn default_view_hidden() -> Vec<usize> {
    VIEW_HIDDEN.to_vec()
}

/// Training hyperparameters. Every key except `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub seed: u64,
    /// Weight of the view-estimation loss.
    #[serde(default = "default_view_weight")]
    pub view_weight: f64,
    /// Weight of the match loss.
    #[serde(default = "default_match_weight")]
    pub match_weight: f64,
    /// Views per object per step; unset means single for match training
    /// and two for LaGOR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_mode: Option<ViewMode>,
    #[serde(default = "default_loss_form")]
    pub loss_form: LossForm,
    /// Keep updating the pretrained match head during LaGOR training.
    #[serde(default = "default_true")]
    pub continue_match: bool,
    #[serde(default = "default_match_hidden")]
    pub match_hidden: Vec<usize>,
    #[serde(default = "default_view_hidden")]
    pub view_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            seed: 0,
            view_weight: default_view_weight(),
            match_weight: default_match_weight(),
            view_mode: None,
            loss_form: default_loss_form(),
            continue_match: true,
            match_hidden: default_match_hidden(),
            view_hidden: default_view_hidden(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon {} must be positive", self.epsilon));
        }
        for (name, w) in [("view_weight", self.view_weight), ("match_weight", self.match_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return fail(format!("{name} {w} must be finite and nonnegative"));
            }
        }
        if self.view_weight == 0.0 && self.match_weight == 0.0 {
            return fail("view_weight and match_weight are both zero".into());
        }
        if self.match_hidden.contains(&0) || self.view_hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::from_toml_str(&text)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Two-way softmax cross-entropy with the gold candidate as target:
/// `ln(1 + exp(distractor - gold))`.
pub fn match_loss(score_gold: f64, score_distractor: f64) -> f64 {
    softplus(score_distractor - score_gold)
}

/// Gradient of [`match_loss`] with respect to (gold, distractor).
pub fn match_loss_grad(score_gold: f64, score_distractor: f64) -> (f64, f64) {
    let p = sigmoid(score_distractor - score_gold);
    (-p, p)
}

impl LossForm {
    /// Loss and its gradient with respect to (gold, distractor) scores.
    pub fn loss_and_grad(self, gold: f64, distractor: f64) -> (f64, (f64, f64)) {
        match self {
            LossForm::MultipleChoice => (
                match_loss(gold, distractor),
                match_loss_grad(gold, distractor),
            ),
            LossForm::Binary => (
                0.5 * (softplus(-gold) + softplus(distractor)),
                (-0.5 * sigmoid(-gold), 0.5 * sigmoid(distractor)),
            ),
        }
    }
}

/// Softmax cross-entropy of `logits` against `true_view`.
pub fn view_loss(logits: &[f64; VIEW_COUNT], true_view: ViewIndex) -> f64 {
    log_sum_exp(logits) - logits[true_view.get()]
}

/// Gradient of [`view_loss`]: `softmax(logits) - onehot(true_view)`.
pub fn view_loss_grad(logits: &[f64; VIEW_COUNT], true_view: ViewIndex) -> [f64; VIEW_COUNT] {
    let lse = log_sum_exp(logits);
    let mut g = logits.map(|l| (l - lse).exp());
    g[true_view.get()] -= 1.0;
    g
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `w_v * L_v + w_s * L_s`.
pub fn combined_loss(view_loss: f64, match_loss: f64, view_weight: f64, match_weight: f64) -> f64 {
    view_weight * view_loss + match_weight * match_loss
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub match_loss: f64,
    pub view_loss: Option<f64>,
    pub combined_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub view_accuracy: Option<f64>,
    pub val_view_accuracy: Option<f64>,
    /// How often each ring position was sampled this epoch.
    pub view_counts: [u64; VIEW_COUNT],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub selected_epoch: usize,
}

impl TrainRecord {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is UTF-8")
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub head: MatchHead,
    pub record: TrainRecord,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct LagorOutcome {
    pub match_head: MatchHead,
    pub view_head: ViewHead,
    pub record: TrainRecord,
    pub steps: u64,
}

fn check_coverage(
    store: &FeatureStore,
    train: &[TaskInstance],
    validation: &[TaskInstance],
) -> Result<(), TrainError> {
    let mut all = train.to_vec();
    all.extend_from_slice(validation);
    let missing = store.missing_keys(&all);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TrainError::MissingEmbeddings(missing))
    }
}

struct Candidates {
    gold: ForwardCache,
    distractor: ForwardCache,
    score_a: f64,
    score_b: f64,
}

fn score_pair(
    head: &MatchHead,
    store: &FeatureStore,
    inst: &TaskInstance,
    selection: &ViewSelection,
) -> Result<Candidates, TrainError> {
    let language = store.lookup_language(&inst.expression.expr_id)?;
    let mut caches = Vec::with_capacity(2);
    for which in [Candidate::A, Candidate::B] {
        let views = select_views(store, &inst.object(which).object_id, selection.get(which))?;
        let pooled = aggregate_views(&views)?;
        caches.push(head.forward(language.as_slice(), pooled.as_slice())?);
    }
    let b = caches.pop().expect("two caches");
    let a = caches.pop().expect("two caches");
    let (score_a, score_b) = (a.output()[0], b.output()[0]);
    let (gold, distractor) = match inst.gold {
        Candidate::A => (a, b),
        Candidate::B => (b, a),
    };
    Ok(Candidates {
        gold,
        distractor,
        score_a,
        score_b,
    })
}

fn correct(inst: &TaskInstance, score_a: f64, score_b: f64) -> bool {
    crate::grounding::Prediction::from_scores(score_a, score_b).choice == inst.gold
}

fn validation_accuracy(
    head: &MatchHead,
    store: &FeatureStore,
    validation: &[TaskInstance],
    mode: ViewMode,
    seed: u64,
) -> Result<Option<f64>, TrainError> {
    if validation.is_empty() {
        return Ok(None);
    }
    let options = EvalOptions {
        workers: Some(1),
        ..EvalOptions::default()
    };
    let eval = evaluate(&MatchScorer(head), validation, store, mode, Some(seed), "val", &options)
        .map_err(|e| match e {
            crate::evaluation::EvalError::Grounding(g) => TrainError::Grounding(g),
            other => TrainError::Config(other.to_string()),
        })?;
    Ok(Some(eval.report.overall.fraction()))
}

fn view_accuracy_on(
    head: &ViewHead,
    store: &FeatureStore,
    instances: &[TaskInstance],
) -> Result<Option<f64>, TrainError> {
    let mut seen = std::collections::BTreeSet::new();
    let (mut right, mut total) = (0usize, 0usize);
    for inst in instances {
        for obj in [&inst.object_a, &inst.object_b] {
            if !seen.insert(obj.object_id.clone()) {
                continue;
            }
            for view in ViewIndex::all() {
                let logits = head.logits(store.lookup_view(&obj.object_id, view)?.as_slice())?;
                right += (argmax(&logits) == view.get()) as usize;
                total += 1;
            }
        }
    }
    Ok((total > 0).then(|| right as f64 / total as f64))
}

fn count_views(counts: &mut [u64; VIEW_COUNT], selection: &ViewSelection) {
    for set in [selection.a, selection.b] {
        for v in set.indices() {
            counts[v.get()] += 1;
        }
    }
}

fn keep_best(best: &mut Option<(f64, usize)>, val: Option<f64>, epoch: usize) -> bool {
    match val {
        // Later epochs win ties.
        Some(acc) if best.is_none_or(|(b, _)| acc >= b) => {
            *best = Some((acc, epoch));
            true
        }
        _ => false,
    }
}

/// Trains a fresh match head on `train`, selecting the epoch with the best
/// accuracy on `validation` (the last epoch when `validation` is empty).
pub fn train_match(
    config: &TrainConfig,
    train: &[TaskInstance],
    validation: &[TaskInstance],
    store: &FeatureStore,
) -> Result<MatchOutcome, TrainError> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "match-init"));
    let head = MatchHead::new(store.dimension(), &config.match_hidden, &mut init_rng)?;
    train_match_from(config, train, validation, store, head)
}

/// Like [`train_match`] but starting from `head`.
pub fn train_match_from(
    config: &TrainConfig,
    train: &[TaskInstance],
    validation: &[TaskInstance],
    store: &FeatureStore,
    mut head: MatchHead,
) -> Result<MatchOutcome, TrainError> {
    config.validate()?;
    if config.match_weight <= 0.0 {
        return Err(TrainError::Config(
            "match training needs match_weight > 0".into(),
        ));
    }
    if train.is_empty() {
        return Err(TrainError::NoInstances);
    }
    if head.embed_dim() != store.dimension() {
        return Err(HeadError::Dimension {
            expected: store.dimension(),
            actual: head.embed_dim(),
        }
        .into());
    }
    check_coverage(store, train, validation)?;
    let mode = config.view_mode.unwrap_or(ViewMode::Single);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::for_mlp(config.adam(), head.mlp());
    let mut grads = Gradients::zeros_like(head.mlp());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut record = TrainRecord::default();
    let mut best: Option<(f64, usize)> = None;
    let mut best_head = head.clone();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut right) = (0.0, 0usize);
        let mut counts = [0u64; VIEW_COUNT];
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            let scale = config.match_weight / batch.len() as f64;
            for &i in batch {
                let inst = &train[i];
                let selection = ViewSelection::sample(mode, &mut rng);
                count_views(&mut counts, &selection);
                let c = score_pair(&head, store, inst, &selection)?;
                let (loss, (g_gold, g_dist)) = config
                    .loss_form
                    .loss_and_grad(c.gold.output()[0], c.distractor.output()[0]);
                loss_sum += loss;
                right += correct(inst, c.score_a, c.score_b) as usize;
                head.mlp().accumulate(&c.gold, &[g_gold], scale, &mut grads)?;
                head.mlp().accumulate(&c.distractor, &[g_dist], scale, &mut grads)?;
            }
            adam_step(&mut opt, head.mlp_mut(), &grads)?;
        }
        let n = train.len() as f64;
        let val = validation_accuracy(&head, store, validation, mode, config.seed)?;
        let match_loss = loss_sum / n;
        record.epochs.push(EpochRecord {
            epoch,
            steps: opt.step_count(),
            match_loss,
            view_loss: None,
            combined_loss: config.match_weight * match_loss,
            train_accuracy: right as f64 / n,
            val_accuracy: val,
            view_accuracy: None,
            val_view_accuracy: None,
            view_counts: counts,
        });
        if keep_best(&mut best, val, epoch) {
            best_head = head.clone();
        }
        log::info!(
            "match epoch {epoch}: loss {match_loss:.5} train acc {:.4} val acc {val:?}",
            right as f64 / n
        );
    }
    let (head, selected) = match best {
        Some((_, e)) => (best_head, e),
        None => (head, config.epochs),
    };
    record.selected_epoch = selected;
    Ok(MatchOutcome {
        head,
        record,
        steps: opt.step_count(),
    })
}

/// Trains LaGOR from a pretrained match head: each step sees two distinct
/// random views per object, scores the pooled pair with the match head and
/// estimates the ring position of all four sampled views with a new view
/// head. The loss is `view_weight * L_v + match_weight * L_s`, with `L_v`
/// averaged over the four views.
pub fn train_lagor(
    config: &TrainConfig,
    train: &[TaskInstance],
    validation: &[TaskInstance],
    store: &FeatureStore,
    pretrained: MatchHead,
) -> Result<LagorOutcome, TrainError> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "view-init"));
    let view_head = ViewHead::new(store.dimension(), &config.view_hidden, &mut init_rng)?;
    train_lagor_from(config, train, validation, store, pretrained, view_head)
}

pub fn train_lagor_from(
    config: &TrainConfig,
    train: &[TaskInstance],
    validation: &[TaskInstance],
    store: &FeatureStore,
    mut match_head: MatchHead,
    mut view_head: ViewHead,
) -> Result<LagorOutcome, TrainError> {
    config.validate()?;
    let mode = config.view_mode.unwrap_or(ViewMode::Two);
    if mode != ViewMode::Two {
        return Err(TrainError::Config(format!(
            "LaGOR trains on two views per object, config asks for {mode}"
        )));
    }
    if train.is_empty() {
        return Err(TrainError::NoInstances);
    }
    for d in [match_head.embed_dim(), view_head.embed_dim()] {
        if d != store.dimension() {
            return Err(HeadError::Dimension {
                expected: store.dimension(),
                actual: d,
            }
            .into());
        }
    }
    check_coverage(store, train, validation)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut match_opt = OptimizerState::for_mlp(config.adam(), match_head.mlp());
    let mut view_opt = OptimizerState::for_mlp(config.adam(), view_head.mlp());
    let mut match_grads = Gradients::zeros_like(match_head.mlp());
    let mut view_grads = Gradients::zeros_like(view_head.mlp());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut record = TrainRecord::default();
    let mut best: Option<(f64, usize)> = None;
    let mut best_heads = (match_head.clone(), view_head.clone());

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut ls_sum, mut lv_sum, mut l_sum) = (0.0, 0.0, 0.0);
        let (mut right, mut view_right, mut view_total) = (0usize, 0usize, 0usize);
        let mut counts = [0u64; VIEW_COUNT];
        for batch in order.chunks(config.batch_size) {
            match_grads.fill_zero();
            view_grads.fill_zero();
            let per = 1.0 / batch.len() as f64;
            for &i in batch {
                let inst = &train[i];
                let selection = ViewSelection::sample(mode, &mut rng);
                count_views(&mut counts, &selection);

                let c = score_pair(&match_head, store, inst, &selection)?;
                let (ls, (g_gold, g_dist)) = config
                    .loss_form
                    .loss_and_grad(c.gold.output()[0], c.distractor.output()[0]);
                right += correct(inst, c.score_a, c.score_b) as usize;
                if config.continue_match {
                    let s = config.match_weight * per;
                    match_head.mlp().accumulate(&c.gold, &[g_gold], s, &mut match_grads)?;
                    match_head.mlp().accumulate(&c.distractor, &[g_dist], s, &mut match_grads)?;
                }

                let mut lv = 0.0;
                let mut sampled = 0usize;
                for which in [Candidate::A, Candidate::B] {
                    let object_id = &inst.object(which).object_id;
                    for view in selection.get(which).indices() {
                        let emb = store.lookup_view(object_id, view)?;
                        let cache = view_head.forward(emb.as_slice())?;
                        let logits: [f64; VIEW_COUNT] =
                            cache.output().try_into().expect("8 logits");
                        lv += view_loss(&logits, view);
                        view_right += (argmax(&logits) == view.get()) as usize;
                        sampled += 1;
                        let g = view_loss_grad(&logits, view);
                        // Scaled below once the number of sampled views is known.
                        view_head.mlp().accumulate(&cache, &g, 1.0, &mut view_grads)?;
                    }
                }
                view_total += sampled;
                // Each instance samples the same number of views, so the
                // per-view average can be applied batch-wide after the loop.
                debug_assert_eq!(sampled, 4);
                let lv = lv / sampled as f64;
                ls_sum += ls;
                lv_sum += lv;
                l_sum += combined_loss(lv, ls, config.view_weight, config.match_weight);
            }
            view_grads.scale(config.view_weight * per / 4.0);
            if config.continue_match {
                adam_step(&mut match_opt, match_head.mlp_mut(), &match_grads)?;
            }
            adam_step(&mut view_opt, view_head.mlp_mut(), &view_grads)?;
        }
        let n = train.len() as f64;
        let val = validation_accuracy(&match_head, store, validation, mode, config.seed)?;
        let val_view = view_accuracy_on(&view_head, store, validation)?;
        record.epochs.push(EpochRecord {
            epoch,
            steps: view_opt.step_count(),
            match_loss: ls_sum / n,
            view_loss: Some(lv_sum / n),
            combined_loss: l_sum / n,
            train_accuracy: right as f64 / n,
            val_accuracy: val,
            view_accuracy: Some(view_right as f64 / view_total as f64),
            val_view_accuracy: val_view,
            view_counts: counts,
        });
        if keep_best(&mut best, val, epoch) {
            best_heads = (match_head.clone(), view_head.clone());
        }
        log::info!(
            "lagor epoch {epoch}: L_s {:.5} L_v {:.5} L {:.5} val acc {val:?} val view acc {val_view:?}",
            ls_sum / n,
            lv_sum / n,
            l_sum / n
        );
    }
    let (match_head, view_head, selected) = match best {
        Some((_, e)) => (best_heads.0, best_heads.1, e),
        None => (match_head, view_head, config.epochs),
    };
    record.selected_epoch = selected;
    Ok(LagorOutcome {
        match_head,
        view_head,
        record,
        steps: view_opt.step_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(i: usize) -> ViewIndex {
        ViewIndex::new(i).unwrap()
    }

    #[test]
    fn match_loss_values() {
        assert!((match_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
        let l = match_loss(20.0, 0.0);
        // ln(1 + x) = x - x^2/2 + O(x^3) with x = e^-20.
        let x = (-20f64).exp();
        assert!((l - (x - x * x / 2.0)).abs() < 1e-24, "{l}");
        assert!(match_loss(1e6, -1e6) >= 0.0);
        assert!((match_loss(-1e3, 0.0) - 1e3).abs() < 1e-9);
        assert!(match_loss(1e308, -1e308).is_finite());
    }

    #[test]
    fn match_loss_gradient_matches_finite_differences() {
        for (g, d) in [(0.0, 0.0), (1.3, -0.4), (-2.0, 3.5), (15.0, -4.0)] {
            let (dg, dd) = match_loss_grad(g, d);
            let h = 1e-5;
            let ng = (match_loss(g + h, d) - match_loss(g - h, d)) / (2.0 * h);
            let nd = (match_loss(g, d + h) - match_loss(g, d - h)) / (2.0 * h);
            assert!((dg - ng).abs() < 1e-6, "{dg} vs {ng}");
            assert!((dd - nd).abs() < 1e-6, "{dd} vs {nd}");
        }
    }

    #[test]
    fn binary_form_gradient_matches_finite_differences() {
        let f = |g: f64, d: f64| LossForm::Binary.loss_and_grad(g, d).0;
        for (g, d) in [(0.0, 0.0), (2.0, -1.0), (-3.0, 4.0)] {
            let (_, (dg, dd)) = LossForm::Binary.loss_and_grad(g, d);
            let h = 1e-5;
            assert!((dg - (f(g + h, d) - f(g - h, d)) / (2.0 * h)).abs() < 1e-6);
            assert!((dd - (f(g, d + h) - f(g, d - h)) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn view_loss_values() {
        assert!((view_loss(&[0.7; 8], view(3)) - 8f64.ln()).abs() < 1e-12);
        let mut logits = [0.0; 8];
        logits[5] = 30.0;
        assert!(view_loss(&logits, view(5)) < 1e-12);
        let mut prev = view_loss(&[0.0; 8], view(2));
        for step in 1..20 {
            let mut l = [0.0; 8];
            l[2] = step as f64 * 0.5;
            let now = view_loss(&l, view(2));
            assert!(now < prev);
            prev = now;
        }
        assert!(view_loss(&[1e300, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], view(0)).is_finite());
    }

    #[test]
    fn view_loss_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.0, 0.5, -0.7, 1.1, 0.2];
        let g = view_loss_grad(&logits, view(6));
        for k in 0..8 {
            let h = 1e-5;
            let mut up = logits;
            up[k] += h;
            let mut down = logits;
            down[k] -= h;
            let n = (view_loss(&up, view(6)) - view_loss(&down, view(6))) / (2.0 * h);
            assert!((g[k] - n).abs() < 1e-8);
        }
    }

    #[test]
    fn combined_loss_algebra() {
        assert_eq!(combined_loss(1.0, 0.5, 1.0, 0.2), 1.1);
        for ls in [0.0, 0.37, 2.5, 13.0] {
            assert_eq!(combined_loss(0.9, ls, 0.0, 0.2), 0.2 * ls);
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let both_zero = TrainConfig {
            view_weight: 0.0,
            match_weight: 0.0,
            ..TrainConfig::default()
        };
        assert!(both_zero.validate().is_err());
        let negative = TrainConfig {
            view_weight: -1.0,
            ..TrainConfig::default()
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip_and_required_seed() {
        let c = TrainConfig {
            seed: 17,
            epochs: 3,
            view_mode: Some(ViewMode::Two),
            ..TrainConfig::default()
        };
        let text = c.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        assert!(TrainConfig::from_toml_str("epochs = 2").is_err());
        assert!(TrainConfig::from_toml_str("seed = 1\nepochs = 0").is_err());
        assert!(TrainConfig::from_toml_str("seed = 1\nlearning_rat = 0.1").is_err());
        let minimal = TrainConfig::from_toml_str("seed = 5").unwrap();
        assert_eq!(minimal.epochs, 50);
        assert_eq!(minimal.match_weight, 0.2);
        assert_eq!(minimal.view_weight, 1.0);
    }
}
