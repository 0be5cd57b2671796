//! Adam with bias-corrected moments. Moments are kept in f64.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use super::HeadError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// State for parameter groups of the given lengths.
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(config: AdamConfig, mlp: &Mlp) -> Self {
        let shapes: Vec<usize> = mlp.params().iter().map(|p| p.len()).collect();
        OptimizerState::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter group. Shapes are checked before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f64]]) -> Result<(), HeadError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(HeadError::Shape(format!(
                "{} parameter groups and {} gradient groups for {} moment groups",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(HeadError::Shape(format!(
                    "group {i}: {} parameters, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to `mlp` using `grads`.
pub fn adam_step(
    state: &mut OptimizerState,
    mlp: &mut Mlp,
    grads: &Gradients,
) -> Result<(), HeadError> {
    let g = grads.slices();
    let mut p = mlp.params_mut();
    state.step(&mut p, &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = OptimizerState::new(AdamConfig::default(), &[3]);
        let mut p = [1.0f32, -2.0, 0.5];
        let before = p;
        state.step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.37, -5.0, 1e-3] {
            let mut state = OptimizerState::new(AdamConfig::default(), &[1]);
            let mut p = [0.0f32];
            state.step(&mut [&mut p[..]], &[&[g]]).unwrap();
            let expected = -1e-3 * f64::signum(g);
            assert!((p[0] as f64 - expected).abs() < 1e-8, "g={g}: {}", p[0]);
        }
    }

    #[test]
    fn descends_convex_quadratic() {
        // f(x) = (x - 3)^2, minimum 0 at x = 3.
        let f = |x: f64| (x - 3.0).powi(2);
        let config = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut state = OptimizerState::new(config, &[1]);
        let mut x = [-1.0f32];
        let initial = f(x[0] as f64);
        for _ in 0..100 {
            let g = 2.0 * (x[0] as f64 - 3.0);
            state.step(&mut [&mut x[..]], &[&[g]]).unwrap();
        }
        let last = f(x[0] as f64);
        assert!(last < initial, "{last} vs {initial}");
        assert!(last >= 0.0);
        assert_eq!(state.step_count(), 100);
    }

    #[test]
    fn shape_mismatch_rejected_without_update() {
        let mut state = OptimizerState::new(AdamConfig::default(), &[2]);
        let mut p = [1.0f32, 1.0];
        assert!(state.step(&mut [&mut p[..]], &[&[1.0]]).is_err());
        assert!(state.step(&mut [&mut p[..1]], &[&[1.0]]).is_err());
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(state.step_count(), 0);
    }
}
