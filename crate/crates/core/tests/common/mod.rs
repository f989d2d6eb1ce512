#![allow(dead_code)]

use fdlab::lstm::{asymmetric_loss, lstm_forward, LstmParams, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean asymmetric loss computed from forward passes only.
pub fn forward_loss(params: &LstmParams, samples: &[Sample<'_>], multiplier: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| asymmetric_loss(lstm_forward(params, s.window).unwrap().0, s.target, multiplier))
        .sum();
    total / samples.len() as f64
}

/// Central finite differences of [`forward_loss`] over every parameter.
pub fn finite_difference_gradient(params: &LstmParams, samples: &[Sample<'_>], multiplier: f64, step: f64) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|i| {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + step;
            let up = forward_loss(&probe, samples, multiplier);
            probe.as_mut_slice()[i] = orig - step;
            let down = forward_loss(&probe, samples, multiplier);
            probe.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with a floor on the denominator so that parameters with
/// (near-)zero gradient are not judged on finite-difference round-off.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct GradCase {
    pub params: LstmParams,
    pub series: Vec<f64>,
}

/// Random network (weights in [-0.5, 0.5]) and a random series giving
/// `samples` training windows.
pub fn random_case(hidden: usize, lookback: usize, samples: usize, seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LstmParams::random(hidden, lookback, 0.5, &mut rng);
    let series = (0..lookback + samples).map(|_| rng.random_range(-1.0..1.0)).collect();
    GradCase { params, series }
}
