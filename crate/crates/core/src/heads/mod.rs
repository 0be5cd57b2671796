//! Trainable heads on top of frozen embeddings.
//!
//! [`MatchHead`] scores a (language, view) pair: the view and language
//! vectors are concatenated, view first, and reduced through ReLU layers to
//! one linear output. [`ViewHead`] maps a single view embedding to 8 logits,
//! one per position on the view ring.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::VIEW_COUNT;
use crate::store::EmbeddingVector;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_match_head, load_view_head,
    save_checkpoint, Checkpoint,
};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckConfig, GradCheckReport};
pub use mlp::{Activation, Backward, ForwardCache, Gradients, Mlp};

/// Hidden widths of the standard match head (input is twice the embedding width).
pub const MATCH_HIDDEN: [usize; 2] = [512, 256];
/// Hidden widths of the standard view head.
pub const VIEW_HIDDEN: [usize; 3] = [256, 128, 64];

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("head produced a non-finite output")]
    NonFinite,
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Match,
    View,
}

impl HeadKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            HeadKind::Match => 0,
            HeadKind::View => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HeadKind::Match),
            1 => Some(HeadKind::View),
            _ => None,
        }
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

fn widen(values: &[f32]) -> impl Iterator<Item = f64> + '_ {
    values.iter().map(|&x| x as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchHead {
    mlp: Mlp,
}

impl MatchHead {
    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, HeadError> {
        let mlp = Mlp::he_uniform(&layer_dims(2 * embed_dim, hidden, 1), Activation::Relu, rng)?;
        Ok(MatchHead { mlp })
    }

    pub fn standard<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Result<Self, HeadError> {
        MatchHead::new(embed_dim, &MATCH_HIDDEN, rng)
    }

    pub fn zeros(embed_dim: usize, hidden: &[usize]) -> Result<Self, HeadError> {
        Ok(MatchHead {
            mlp: Mlp::zeros(&layer_dims(2 * embed_dim, hidden, 1), Activation::Relu)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self, HeadError> {
        if mlp.output_dim() != 1 || !mlp.input_dim().is_multiple_of(2) {
            return Err(HeadError::Architecture(format!(
                "match head needs an even input width and one output, got {:?}",
                mlp.dims()
            )));
        }
        Ok(MatchHead { mlp })
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.input_dim() / 2
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn into_mlp(self) -> Mlp {
        self.mlp
    }

    fn input(&self, language: &[f32], view: &[f32]) -> Result<Vec<f64>, HeadError> {
        let d = self.embed_dim();
        for len in [language.len(), view.len()] {
            if len != d {
                return Err(HeadError::Dimension {
                    expected: d,
                    actual: len,
                });
            }
        }
        Ok(widen(view).chain(widen(language)).collect())
    }

    /// Forward pass keeping the activations for a later backward pass.
    pub fn forward(&self, language: &[f32], view: &[f32]) -> Result<ForwardCache, HeadError> {
        let cache = self.mlp.forward(&self.input(language, view)?)?;
        if !cache.output()[0].is_finite() {
            return Err(HeadError::NonFinite);
        }
        Ok(cache)
    }

    pub fn score(&self, language: &[f32], view: &[f32]) -> Result<f64, HeadError> {
        Ok(self.forward(language, view)?.output()[0])
    }
}

/// Match score `s(L, V)` for one language embedding and one (possibly pooled) view.
pub fn match_forward(
    head: &MatchHead,
    language: &EmbeddingVector,
    view: &EmbeddingVector,
) -> Result<f64, HeadError> {
    head.score(language.as_slice(), view.as_slice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewHead {
    mlp: Mlp,
}

impl ViewHead {
    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, HeadError> {
        let mlp = Mlp::he_uniform(
            &layer_dims(embed_dim, hidden, VIEW_COUNT),
            Activation::Relu,
            rng,
        )?;
        Ok(ViewHead { mlp })
    }

    pub fn standard<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Result<Self, HeadError> {
        ViewHead::new(embed_dim, &VIEW_HIDDEN, rng)
    }

    pub fn zeros(embed_dim: usize, hidden: &[usize]) -> Result<Self, HeadError> {
        Ok(ViewHead {
            mlp: Mlp::zeros(&layer_dims(embed_dim, hidden, VIEW_COUNT), Activation::Relu)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self, HeadError> {
        if mlp.output_dim() != VIEW_COUNT {
            return Err(HeadError::Architecture(format!(
                "view head needs {VIEW_COUNT} outputs, got {:?}",
                mlp.dims()
            )));
        }
        Ok(ViewHead { mlp })
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn into_mlp(self) -> Mlp {
        self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn forward(&self, view: &[f32]) -> Result<ForwardCache, HeadError> {
        let x: Vec<f64> = widen(view).collect();
        let cache = self.mlp.forward(&x)?;
        if cache.output().iter().any(|v| !v.is_finite()) {
            return Err(HeadError::NonFinite);
        }
        Ok(cache)
    }

    pub fn logits(&self, view: &[f32]) -> Result<[f64; VIEW_COUNT], HeadError> {
        let cache = self.forward(view)?;
        Ok(cache.output().try_into().expect("view head has 8 outputs"))
    }
}

/// Eight view logits for one view embedding.
pub fn view_forward(head: &ViewHead, view: &EmbeddingVector) -> Result<[f64; VIEW_COUNT], HeadError> {
    head.logits(view.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(dim: usize, seed: u64) -> EmbeddingVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Plain matrix-vector evaluation of the standard match head over
    /// `[view; language]`, independent of `Mlp::forward`.
    fn dense_oracle(mlp: &Mlp, x: Vec<f64>) -> Vec<f64> {
        let mut a = x;
        let n = mlp.layers().len();
        for (i, l) in mlp.layers().iter().enumerate() {
            let mut z: Vec<f64> = l.bias().iter().map(|&b| b as f64).collect();
            for (r, zr) in z.iter_mut().enumerate() {
                for (c, ac) in a.iter().enumerate() {
                    *zr += l.weights()[r * l.in_dim() + c] as f64 * ac;
                }
            }
            if i + 1 < n {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    #[test]
    fn standard_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MatchHead::standard(512, &mut rng).unwrap();
        assert_eq!(m.mlp().dims(), vec![1024, 512, 256, 1]);
        let v = ViewHead::standard(512, &mut rng).unwrap();
        assert_eq!(v.mlp().dims(), vec![512, 256, 128, 64, 8]);
    }

    #[test]
    fn zero_head_scores_zero() {
        let m = MatchHead::zeros(512, &MATCH_HIDDEN).unwrap();
        assert_eq!(match_forward(&m, &emb(512, 1), &emb(512, 2)).unwrap(), 0.0);
        let v = ViewHead::zeros(512, &VIEW_HIDDEN).unwrap();
        let logits = view_forward(&v, &emb(512, 3)).unwrap();
        assert_eq!(logits, [0.0; 8]);
        let ce = crate::training::view_loss(&logits, crate::data::ViewIndex::new(2).unwrap());
        assert!((ce - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn match_forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MatchHead::standard(512, &mut rng).unwrap();
        let (l, v) = (emb(512, 6), emb(512, 7));
        let x: Vec<f64> = v
            .as_slice()
            .iter()
            .chain(l.as_slice())
            .map(|&x| x as f64)
            .collect();
        let want = dense_oracle(m.mlp(), x)[0];
        let got = match_forward(&m, &l, &v).unwrap();
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn view_forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = ViewHead::standard(512, &mut rng).unwrap();
        let v = emb(512, 9);
        let want = dense_oracle(h.mlp(), v.as_slice().iter().map(|&x| x as f64).collect());
        let got = view_forward(&h, &v).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn doubling_output_layer_doubles_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = MatchHead::new(16, &[8, 4], &mut rng).unwrap();
        m.mlp_mut().layers_mut()[2].bias[0] = 0.3;
        let (l, v) = (emb(16, 11), emb(16, 12));
        let before = match_forward(&m, &l, &v).unwrap();
        let last = &mut m.mlp_mut().layers_mut()[2];
        last.weights.iter_mut().for_each(|w| *w *= 2.0);
        last.bias.iter_mut().for_each(|b| *b *= 2.0);
        let after = match_forward(&m, &l, &v).unwrap();
        assert!((after - 2.0 * before).abs() < 1e-12);
    }

    #[test]
    fn permuting_output_rows_permutes_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut h = ViewHead::new(12, &[10, 6], &mut rng).unwrap();
        let v = emb(12, 14);
        let before = view_forward(&h, &v).unwrap();
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let last = &mut h.mlp_mut().layers_mut()[2];
        let in_dim = last.in_dim();
        let (w, b) = (last.weights.clone(), last.bias.clone());
        for (dst, &src) in perm.iter().enumerate() {
            last.weights[dst * in_dim..(dst + 1) * in_dim]
                .copy_from_slice(&w[src * in_dim..(src + 1) * in_dim]);
            last.bias[dst] = b[src];
        }
        let after = view_forward(&h, &v).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(after[dst], before[src]);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = MatchHead::zeros(8, &[4]).unwrap();
        assert!(matches!(
            match_forward(&m, &emb(8, 1), &emb(9, 2)),
            Err(HeadError::Dimension { .. })
        ));
        assert!(MatchHead::from_mlp(Mlp::zeros(&[4, 2], Activation::Relu).unwrap()).is_err());
    }

    #[test]
    fn final_bias_shift_preserves_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut m = MatchHead::new(16, &[8], &mut rng).unwrap();
        let l = emb(16, 1);
        let (va, vb) = (emb(16, 2), emb(16, 3));
        let a0 = match_forward(&m, &l, &va).unwrap();
        let b0 = match_forward(&m, &l, &vb).unwrap();
        m.mlp_mut().layers_mut()[1].bias[0] += 17.5;
        let a1 = match_forward(&m, &l, &va).unwrap();
        let b1 = match_forward(&m, &l, &vb).unwrap();
        assert_eq!(a0 >= b0, a1 >= b1);
    }
}
