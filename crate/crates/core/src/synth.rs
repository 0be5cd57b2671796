//! Synthetic fixtures whose answers are forced by construction.
//!
//! The concept space is split into `concepts` mutually orthogonal blocks of
//! `concept_dim / concepts` orthonormal directions. An object's base vector
//! is the first direction of its concept's block plus Gaussian noise along
//! the block's other directions, renormalized. All eight views of an object
//! equal its base. The language vector of an expression is exactly the gold
//! object's base, and distractors come from another concept, so the cosine
//! of the gold pooled view is 1 and the distractor's is exactly 0.
//!
//! With `view_codes` the last eight coordinates are reserved: view `v` of
//! an object adds `view_code_scale` at coordinate `dim - 8 + v`, which makes
//! the ring position linearly separable. Concepts then live in the first
//! `dim - 8` coordinates.
//!
//! Every category is one concept restricted to one fold (`c03-train`,
//! `c03-val`), so validation objects are unseen but share the concepts.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    Candidate, Dataset, Fold, FoldAssignment, FoldTable, Mode, ObjectEntry, PairFold,
    ReferringExpression, TaskInstance, ViewIndex, VIEW_COUNT,
};
use crate::store::{EmbeddingVector, FeatureStore, StoreError, StoreMeta};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub concepts: usize,
    pub train_objects_per_concept: usize,
    pub val_objects_per_concept: usize,
    pub train_instances: usize,
    pub val_instances: usize,
    /// Standard deviation of the noise along each secondary direction of a
    /// concept's block.
    pub noise: f64,
    pub view_codes: bool,
    pub view_code_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            dim: 64,
            concepts: 16,
            train_objects_per_concept: 8,
            val_objects_per_concept: 4,
            train_instances: 1024,
            val_instances: 256,
            noise: 0.3,
            view_codes: false,
            view_code_scale: 1.0,
        }
    }
}

impl SynthConfig {
    fn concept_dim(&self) -> usize {
        if self.view_codes {
            self.dim.saturating_sub(VIEW_COUNT)
        } else {
            self.dim
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Config(m.into()));
        if self.concepts < 2 {
            return fail("need at least two concepts");
        }
        if self.concept_dim() < self.concepts {
            return fail("concept space smaller than the number of concepts");
        }
        if self.train_objects_per_concept == 0 || self.val_objects_per_concept == 0 {
            return fail("each fold needs objects");
        }
        if self.train_instances == 0 {
            return fail("need training instances");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail("noise must be finite and nonnegative");
        }
        if !(self.view_code_scale.is_finite() && self.view_code_scale > 0.0) {
            return fail("view_code_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub dataset: Dataset,
    pub store: FeatureStore,
}

impl SynthFixture {
    pub fn train(&self) -> Vec<TaskInstance> {
        self.dataset.select(&[PairFold::TrainTrain])
    }

    pub fn validation(&self) -> Vec<TaskInstance> {
        self.dataset.select(&[PairFold::ValVal])
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Removes the component of `v` along the unit vector `u`.
fn reject(v: &[f64], u: &[f64]) -> Vec<f64> {
    let d = dot(v, u);
    v.iter().zip(u).map(|(x, y)| x - d * y).collect()
}

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            v = reject(&v, b);
        }
        if dot(&v, &v).sqrt() > 1e-6 {
            basis.push(normalized(v));
        }
    }
    basis
}

fn to_embedding(v: &[f64]) -> Result<EmbeddingVector, StoreError> {
    EmbeddingVector::new(v.iter().map(|&x| x as f32).collect())
}

struct SynthObject {
    entry: Arc<ObjectEntry>,
    concept: usize,
    /// Unit vector in the concept coordinates.
    base: Vec<f64>,
}

/// Builds the fixture described in the module docs.
pub fn separable(config: &SynthConfig) -> Result<SynthFixture, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cdim = config.concept_dim();
    let width = cdim / config.concepts;
    let basis = orthonormal(&mut rng, config.concepts * width, cdim);
    let blocks: Vec<&[Vec<f64>]> = basis.chunks(width).collect();

    let encoder = if config.view_codes { "synthetic-view-separable" } else { "synthetic-separable" };
    let mut store = FeatureStore::new(StoreMeta::new(encoder, config.dim));
    let mut objects: Vec<Arc<ObjectEntry>> = Vec::new();
    let mut assignments = Vec::new();
    let mut instances = Vec::new();

    for (fold, per_concept, count) in [
        (Fold::Train, config.train_objects_per_concept, config.train_instances),
        (Fold::Val, config.val_objects_per_concept, config.val_instances),
    ] {
        let mut pool: Vec<SynthObject> = Vec::new();
        for (k, block) in blocks.iter().enumerate() {
            let category = format!("c{k:02}-{}", fold.as_str());
            assignments.push(FoldAssignment {
                category: category.clone(),
                fold,
            });
            for j in 0..per_concept {
                let id = format!("{category}-o{j:02}");
                let mut base = block[0].clone();
                for direction in &block[1..] {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    base.iter_mut()
                        .zip(direction)
                        .for_each(|(b, d)| *b += config.noise * g * d);
                }
                let base = normalized(base);
                let entry = Arc::new(ObjectEntry::with_default_views(id, category.clone()));
                objects.push(entry.clone());
                pool.push(SynthObject {
                    entry,
                    concept: k,
                    base,
                });
            }
        }

        for n in 0..count {
            let gold_obj = pool.choose(&mut rng).expect("pool is nonempty");
            let distractor = loop {
                let d = pool.choose(&mut rng).expect("pool is nonempty");
                if d.concept != gold_obj.concept {
                    break d;
                }
            };
            let instance_id = format!("{}-{n:05}", fold.as_str());
            let expr_id = format!("{instance_id}-e");
            let mode = if rng.gen_bool(0.5) { Mode::Visual } else { Mode::Blindfolded };
            let text = format!("the c{:02} object", gold_obj.concept);
            let expression = ReferringExpression::new(&expr_id, text, mode)
                .map_err(SynthError::Config)?;

            let mut language = gold_obj.base.clone();
            language.resize(config.dim, 0.0);
            store.insert_language(&expr_id, to_embedding(&language)?)?;

            let gold = if rng.gen_bool(0.5) { Candidate::A } else { Candidate::B };
            let (a, b) = match gold {
                Candidate::A => (gold_obj, distractor),
                Candidate::B => (distractor, gold_obj),
            };
            instances.push(
                TaskInstance::new(instance_id, expression, a.entry.clone(), b.entry.clone(), gold)
                    .map_err(SynthError::Config)?,
            );
        }

        for obj in &pool {
            let v = &obj.base;
            for view in ViewIndex::all() {
                let mut e = v.clone();
                e.resize(config.dim, 0.0);
                if config.view_codes {
                    e[cdim + view.get()] = config.view_code_scale;
                }
                store.insert_view(&obj.entry.object_id, view, to_embedding(&e)?)?;
            }
        }
    }

    let folds = FoldTable::from_assignments(assignments)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    Ok(SynthFixture {
        dataset: Dataset::new(objects, instances, Some(folds)),
        store,
    })
}
