//! Referent selection: view selection, maxpool aggregation, and the
//! zero-shot cosine and trained match-head scorers.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Candidate, ViewIndex, VIEW_COUNT};
use crate::heads::{HeadError, MatchHead, ViewHead};
use crate::store::{EmbeddingVector, FeatureStore, StoreError};

/// Score gap below which a prediction is flagged as a tie.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("no view features to aggregate")]
    NoViews,
    #[error("view features disagree in dimension ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("two-view selection needs distinct views, got {0} twice")]
    RepeatedView(ViewIndex),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

/// Views of one object that a scorer gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "views", rename_all = "lowercase")]
pub enum ViewSet {
    Single(ViewIndex),
    Two(ViewIndex, ViewIndex),
    All8,
}

impl ViewSet {
    pub fn two(a: ViewIndex, b: ViewIndex) -> Result<Self, GroundingError> {
        if a == b {
            return Err(GroundingError::RepeatedView(a));
        }
        Ok(ViewSet::Two(a, b))
    }

    pub fn indices(&self) -> Vec<ViewIndex> {
        match *self {
            ViewSet::Single(v) => vec![v],
            ViewSet::Two(a, b) => vec![a, b],
            ViewSet::All8 => ViewIndex::all().collect(),
        }
    }

    pub fn mode(&self) -> ViewMode {
        match self {
            ViewSet::Single(_) => ViewMode::Single,
            ViewSet::Two(..) => ViewMode::Two,
            ViewSet::All8 => ViewMode::All8,
        }
    }
}

impl fmt::Display for ViewSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewSet::Single(v) => write!(f, "{v}"),
            ViewSet::Two(a, b) => write!(f, "{a}+{b}"),
            ViewSet::All8 => f.write_str("all"),
        }
    }
}

/// How many views per object: one, two distinct, or the full ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    Single,
    Two,
    All8,
}

impl ViewMode {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> ViewSet {
        let view = |i: usize| ViewIndex::new(i).expect("index below 8");
        match self {
            ViewMode::Single => ViewSet::Single(view(rng.gen_range(0..VIEW_COUNT))),
            ViewMode::Two => {
                let picked = sample(rng, VIEW_COUNT, 2);
                ViewSet::Two(view(picked.index(0)), view(picked.index(1)))
            }
            ViewMode::All8 => ViewSet::All8,
        }
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, ViewMode::All8)
    }

    pub fn label(self) -> &'static str {
        match self {
            ViewMode::Single => "Single",
            ViewMode::Two => "Two",
            ViewMode::All8 => "360",
        }
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewMode::Single => "single",
            ViewMode::Two => "two",
            ViewMode::All8 => "all8",
        })
    }
}

/// Selected views for both candidates of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSelection {
    pub a: ViewSet,
    pub b: ViewSet,
}

impl ViewSelection {
    pub fn same(set: ViewSet) -> Self {
        ViewSelection { a: set, b: set }
    }

    pub fn sample<R: Rng + ?Sized>(mode: ViewMode, rng: &mut R) -> Self {
        let a = mode.sample(rng);
        let b = mode.sample(rng);
        ViewSelection { a, b }
    }

    /// Selection that depends only on `(seed, key)`, so it is unaffected by
    /// the order instances are visited in.
    pub fn for_key(mode: ViewMode, seed: u64, key: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, key));
        ViewSelection::sample(mode, &mut rng)
    }

    pub fn get(&self, which: Candidate) -> ViewSet {
        match which {
            Candidate::A => self.a,
            Candidate::B => self.b,
        }
    }

    pub fn swapped(&self) -> Self {
        ViewSelection {
            a: self.b,
            b: self.a,
        }
    }
}

/// FNV-1a over `key`, mixed with `seed` through splitmix64.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(29);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub choice: Candidate,
    pub score_a: f64,
    pub score_b: f64,
    pub tie: bool,
}

impl Prediction {
    /// `A` wins ties; `tie` is set when the gap is below [`TIE_EPSILON`].
    pub fn from_scores(score_a: f64, score_b: f64) -> Self {
        Prediction {
            choice: if score_a >= score_b {
                Candidate::A
            } else {
                Candidate::B
            },
            score_a,
            score_b,
            tie: (score_a - score_b).abs() < TIE_EPSILON,
        }
    }
}

/// Component-wise maximum over view features.
pub fn aggregate_views(features: &[EmbeddingVector]) -> Result<EmbeddingVector, GroundingError> {
    let (first, rest) = features.split_first().ok_or(GroundingError::NoViews)?;
    let mut pooled = first.as_slice().to_vec();
    for f in rest {
        if f.dim() != pooled.len() {
            return Err(GroundingError::Dimension(pooled.len(), f.dim()));
        }
        pooled
            .iter_mut()
            .zip(f.as_slice())
            .for_each(|(p, &x)| *p = p.max(x));
    }
    Ok(EmbeddingVector::new(pooled)?)
}

/// Looks up the embeddings of `set` for one object.
pub fn select_views(
    store: &FeatureStore,
    object_id: &str,
    set: ViewSet,
) -> Result<Vec<EmbeddingVector>, GroundingError> {
    set.indices()
        .into_iter()
        .map(|v| Ok(store.lookup_view(object_id, v)?.clone()))
        .collect()
}

fn cosine_against(language_unit: &[f64], view: &EmbeddingVector) -> Result<f64, GroundingError> {
    let v = view.normalized_f64()?;
    if v.len() != language_unit.len() {
        return Err(GroundingError::Dimension(language_unit.len(), v.len()));
    }
    Ok(language_unit.iter().zip(&v).map(|(a, b)| a * b).sum())
}

/// Cosine of the language embedding against each candidate's pooled view.
pub fn zero_shot_select(
    language: &EmbeddingVector,
    views_a: &[EmbeddingVector],
    views_b: &[EmbeddingVector],
) -> Result<Prediction, GroundingError> {
    let l = language.normalized_f64()?;
    let a = cosine_against(&l, &aggregate_views(views_a)?)?;
    let b = cosine_against(&l, &aggregate_views(views_b)?)?;
    Ok(Prediction::from_scores(a, b))
}

/// Match-head score of each candidate's pooled view.
pub fn match_select(
    head: &MatchHead,
    language: &EmbeddingVector,
    views_a: &[EmbeddingVector],
    views_b: &[EmbeddingVector],
) -> Result<Prediction, GroundingError> {
    let a = head.score(language.as_slice(), aggregate_views(views_a)?.as_slice())?;
    let b = head.score(language.as_slice(), aggregate_views(views_b)?.as_slice())?;
    Ok(Prediction::from_scores(a, b))
}

/// Anything that can pick a referent from the selected views of A and B.
pub trait ReferentScorer: Sync {
    fn name(&self) -> String;

    fn predict(
        &self,
        language: &EmbeddingVector,
        views_a: &[EmbeddingVector],
        views_b: &[EmbeddingVector],
    ) -> Result<Prediction, GroundingError>;

    /// Estimated ring position of a single view, for scorers that have one.
    fn estimate_view(&self, _view: &EmbeddingVector) -> Result<Option<ViewIndex>, GroundingError> {
        Ok(None)
    }
}

pub struct ZeroShot;

impl ReferentScorer for ZeroShot {
    fn name(&self) -> String {
        "CLIP".into()
    }

    fn predict(
        &self,
        language: &EmbeddingVector,
        views_a: &[EmbeddingVector],
        views_b: &[EmbeddingVector],
    ) -> Result<Prediction, GroundingError> {
        zero_shot_select(language, views_a, views_b)
    }
}

pub struct MatchScorer<'a>(pub &'a MatchHead);

impl ReferentScorer for MatchScorer<'_> {
    fn name(&self) -> String {
        "MATCH".into()
    }

    fn predict(
        &self,
        language: &EmbeddingVector,
        views_a: &[EmbeddingVector],
        views_b: &[EmbeddingVector],
    ) -> Result<Prediction, GroundingError> {
        match_select(self.0, language, views_a, views_b)
    }
}

/// Match head trained jointly with view estimation; the view head only
/// contributes view estimates to the prediction log.
pub struct LagorScorer<'a> {
    pub head: &'a MatchHead,
    pub view: Option<&'a ViewHead>,
}

impl ReferentScorer for LagorScorer<'_> {
    fn name(&self) -> String {
        "LaGOR".into()
    }

    fn predict(
        &self,
        language: &EmbeddingVector,
        views_a: &[EmbeddingVector],
        views_b: &[EmbeddingVector],
    ) -> Result<Prediction, GroundingError> {
        match_select(self.head, language, views_a, views_b)
    }

    fn estimate_view(&self, view: &EmbeddingVector) -> Result<Option<ViewIndex>, GroundingError> {
        let Some(head) = self.view else {
            return Ok(None);
        };
        let logits = head.logits(view.as_slice())?;
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &l)| if l > logits[best] { i } else { best });
        Ok(Some(ViewIndex::new(best).expect("8 logits")))
    }
}
