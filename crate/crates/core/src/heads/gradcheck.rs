//! Central finite-difference check of analytic gradients.
//!
//! Each probe draws a Gaussian input `x` and upstream vector `r`, takes the
//! scalar loss `L = r . f(x)`, and compares one coordinate of the analytic
//! gradient (a parameter or an input component) against
//! `(L(p + h) - L(p - h)) / (p+ - p-)`, where `p+` and `p-` are the actual
//! f32 values after perturbation. A probe is redrawn when a hidden
//! pre-activation sits within `kink_margin` of zero or when the perturbation
//! flips any ReLU.
//!
//! Relative error is `|a - n| / max(|a|, |n|, floor)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::mlp::{Backward, ForwardCache, Mlp};
use super::HeadError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub kink_margin: f64,
    pub seed: u64,
    /// Coordinates probed per random input.
    pub probes_per_input: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            probes: 128,
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_margin: 1e-4,
            seed: 0,
            probes_per_input: 8,
        }
    }
}

/// What a probe perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbeTarget {
    Weight { layer: usize, index: usize },
    Bias { layer: usize, index: usize },
    Input { index: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub target: ProbeTarget,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub probes: usize,
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub worst: Option<ProbeResult>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `mlp.backward` against finite differences.
pub fn gradient_check(mlp: &Mlp, config: &GradCheckConfig) -> Result<GradCheckReport, HeadError> {
    gradient_check_with(mlp, config, |m, cache, upstream| m.backward(cache, upstream))
}

/// Like [`gradient_check`] with a caller-supplied analytic gradient.
pub fn gradient_check_with<F>(
    mlp: &Mlp,
    config: &GradCheckConfig,
    analytic: F,
) -> Result<GradCheckReport, HeadError>
where
    F: Fn(&Mlp, &ForwardCache, &[f64]) -> Result<Backward, HeadError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = mlp.clone();
    let layers = mlp.layers().len();
    let mut results: Vec<ProbeResult> = Vec::with_capacity(config.probes);
    let mut redrawn = 0usize;
    let max_attempts = config.probes.saturating_mul(50).max(1000);
    let mut attempts = 0usize;

    while results.len() < config.probes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(HeadError::Shape(
                "gradient check could not find kink-free probes".into(),
            ));
        }
        let x: Vec<f64> = (0..mlp.input_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let r: Vec<f64> = (0..mlp.output_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let loss = |cache: &ForwardCache| -> f64 {
            cache.output().iter().zip(&r).map(|(o, w)| o * w).sum()
        };
        let base = work.forward(&x)?;
        if base.min_hidden_magnitude() < config.kink_margin {
            redrawn += 1;
            continue;
        }
        let grads = analytic(&work, &base, &r)?;

        for k in 0..config.probes_per_input {
            if results.len() >= config.probes {
                break;
            }
            // Cycle layers so every layer is covered; every fifth probe
            // targets the input instead.
            let slot = results.len() + k;
            let target = if slot % 5 == 4 {
                ProbeTarget::Input {
                    index: rng.gen_range(0..mlp.input_dim()),
                }
            } else {
                let layer = slot % layers;
                let l = &mlp.layers()[layer];
                if rng.gen_bool(0.5) {
                    ProbeTarget::Weight {
                        layer,
                        index: rng.gen_range(0..l.weights().len()),
                    }
                } else {
                    ProbeTarget::Bias {
                        layer,
                        index: rng.gen_range(0..l.bias().len()),
                    }
                }
            };

            let (analytic_value, plus, minus, denom) = match target {
                ProbeTarget::Input { index } => {
                    let mut xp = x.clone();
                    xp[index] += config.step;
                    let mut xm = x.clone();
                    xm[index] -= config.step;
                    (
                        grads.input[index],
                        work.forward(&xp)?,
                        work.forward(&xm)?,
                        xp[index] - xm[index],
                    )
                }
                ProbeTarget::Weight { layer, index } | ProbeTarget::Bias { layer, index } => {
                    let is_weight = matches!(target, ProbeTarget::Weight { .. });
                    let a = if is_weight {
                        grads.params.weights[layer][index]
                    } else {
                        grads.params.biases[layer][index]
                    };
                    let original = param(&work, layer, index, is_weight);
                    let up = (original as f64 + config.step) as f32;
                    let down = (original as f64 - config.step) as f32;
                    set_param(&mut work, layer, index, is_weight, up);
                    let plus = work.forward(&x)?;
                    set_param(&mut work, layer, index, is_weight, down);
                    let minus = work.forward(&x)?;
                    set_param(&mut work, layer, index, is_weight, original);
                    (a, plus, minus, up as f64 - down as f64)
                }
            };
            if !plus.same_activation_pattern(&base) || !minus.same_activation_pattern(&base) {
                redrawn += 1;
                continue;
            }
            let numeric = (loss(&plus) - loss(&minus)) / denom;
            results.push(ProbeResult {
                target,
                analytic: analytic_value,
                numeric,
                rel_error: rel_error(analytic_value, numeric, config.floor),
            });
        }
    }

    let worst = results
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        probes: results.len(),
        redrawn,
        max_rel_error,
        worst,
        tolerance: config.tolerance,
        passed: max_rel_error < config.tolerance,
    })
}

fn param(mlp: &Mlp, layer: usize, index: usize, weight: bool) -> f32 {
    let l = &mlp.layers()[layer];
    if weight {
        l.weights()[index]
    } else {
        l.bias()[index]
    }
}

fn set_param(mlp: &mut Mlp, layer: usize, index: usize, weight: bool, value: f32) {
    let l = &mut mlp.layers_mut()[layer];
    if weight {
        l.weights[index] = value;
    } else {
        l.bias[index] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::mlp::Activation;

    fn small(activation: Activation, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::he_uniform(&[10, 8, 6, 3], activation, &mut rng).unwrap()
    }

    #[test]
    fn relu_network_passes() {
        let report = gradient_check(&small(Activation::Relu, 1), &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.probes, 128);
    }

    #[test]
    fn linear_network_agrees_tightly() {
        let config = GradCheckConfig {
            tolerance: 1e-7,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&small(Activation::Identity, 2), &config).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.redrawn, 0);
    }

    #[test]
    fn sign_flip_on_one_layer_is_caught() {
        let mlp = small(Activation::Relu, 3);
        let report = gradient_check_with(&mlp, &GradCheckConfig::default(), |m, cache, r| {
            let mut b = m.backward(cache, r)?;
            b.params.weights[1].iter_mut().for_each(|g| *g = -*g);
            Ok(b)
        })
        .unwrap();
        assert!(!report.passed, "{report:?}");
        assert!(matches!(
            report.worst.unwrap().target,
            ProbeTarget::Weight { layer: 1, .. }
        ));
    }

    #[test]
    fn every_parameter_of_a_tiny_net_matches() {
        let mlp = small(Activation::Relu, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = [0.3, -1.2, 0.8];
        let cache = mlp.forward(&x).unwrap();
        assert!(cache.min_hidden_magnitude() > 1e-3);
        let b = mlp.backward(&cache, &r).unwrap();
        let loss = |m: &Mlp| -> f64 {
            m.predict(&x).unwrap().iter().zip(&r).map(|(o, w)| o * w).sum()
        };
        let mut work = mlp.clone();
        for layer in 0..3 {
            for weight in [true, false] {
                let n = if weight {
                    mlp.layers()[layer].weights().len()
                } else {
                    mlp.layers()[layer].bias().len()
                };
                for index in 0..n {
                    let p = param(&work, layer, index, weight);
                    let (up, down) = (p + 1e-3, p - 1e-3);
                    set_param(&mut work, layer, index, weight, up);
                    let lp = loss(&work);
                    set_param(&mut work, layer, index, weight, down);
                    let lm = loss(&work);
                    set_param(&mut work, layer, index, weight, p);
                    let numeric = (lp - lm) / (up as f64 - down as f64);
                    let analytic = if weight {
                        b.params.weights[layer][index]
                    } else {
                        b.params.biases[layer][index]
                    };
                    assert!(
                        rel_error(analytic, numeric, 1e-6) < 1e-4,
                        "layer {layer} weight={weight} index {index}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn tolerance_below_float_noise_fails() {
        let config = GradCheckConfig {
            tolerance: 1e-12,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&small(Activation::Relu, 5), &config).unwrap();
        assert!(!report.passed, "{report:?}");
    }
}
