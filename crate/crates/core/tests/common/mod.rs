//! Helpers shared by the integration tests: random table models and frozen
//! batches built independently of the library's own generators.

#![allow(dead_code)]

use longfair::objective::{FrozenBatch, UtilityRow};
use longfair::scm::{InitDistribution, Partition, TimeLaggedScm, Transition};
use longfair::DecisionModel;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random point of the probability simplex with `k` entries, bounded away
/// from zero so no cell is empty.
pub fn simplex(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| 0.05 + r.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Scalar feature on states `0, 1, ..., k-1` with random tables.
pub fn random_table_scm(r: &mut ChaCha8Rng, k: usize, horizon: usize) -> TimeLaggedScm {
    let states: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64]).collect();
    let next = (0..k).map(|_| [simplex(r, k), simplex(r, k)]).collect();
    let redlining = if r.random::<bool>() { vec![0] } else { vec![] };
    TimeLaggedScm {
        feature_dim: 1,
        horizon,
        init: InitDistribution::Table { states: states.clone(), probs: [simplex(r, k), simplex(r, k)] },
        transition: Transition::Table { states, next },
        truth_model: DecisionModel::zeros(1),
        partition: Partition { relevant: vec![0], irrelevant: vec![], redlining },
    }
}

pub fn random_model(r: &mut ChaCha8Rng, feature_dim: usize, scale: f64) -> DecisionModel {
    DecisionModel::new((0..feature_dim + 2).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()).unwrap()
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(rand_distr::StandardNormal)
}

fn cloud(r: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| shift + gauss(r)).collect()).collect()
}

/// Batch whose `s+` draws sit above the `s-` draws, so the fairness hinges
/// are active for small parameters.
pub fn random_batch(r: &mut ChaCha8Rng, d: usize, horizon: usize, n: usize) -> FrozenBatch {
    let utility = (0..horizon)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let s = u8::from(r.random::<bool>());
                    let x: Vec<f64> = (0..d).map(|_| 0.5 * f64::from(s) + gauss(r)).collect();
                    let y = if r.random::<f64>() < 0.5 + 0.2 * x[0].tanh() { 1 } else { -1 };
                    UtilityRow { s, x, y }
                })
                .collect()
        })
        .collect();
    FrozenBatch {
        utility,
        longterm_plus: cloud(r, n, d, 0.8),
        longterm_minus: cloud(r, n, d, -0.8),
        shortterm_minus: (0..horizon).map(|_| cloud(r, n, d, -0.3)).collect(),
        shortterm_plus: (0..horizon).map(|_| cloud(r, n, d, 0.3)).collect(),
    }
}

/// Population variance of `f` under a finite distribution.
pub fn variance(states: &[Vec<f64>], probs: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mean: f64 = states.iter().zip(probs).map(|(x, p)| p * f(x)).sum();
    states.iter().zip(probs).map(|(x, p)| p * (f(x) - mean).powi(2)).sum()
}
