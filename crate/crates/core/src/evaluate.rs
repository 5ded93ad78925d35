//! Deployment simulation and the per-step accuracy / fairness tables.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{effect, Mode};
use crate::io::sha256_hex;
use crate::model::DecisionModel;
use crate::rng;
use crate::scm::{PreparedInit, TimeLaggedScm};
use crate::trainer::linear_fit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub algorithm: String,
    pub seed: u64,
    pub n: usize,
    pub model_hash: String,
    /// Index `t - 1` holds the value at step `t`.
    pub accuracy: Vec<f64>,
    pub short_term: Vec<f64>,
    /// Long-term effect with the horizon truncated at `t`.
    pub long_term: Vec<f64>,
}

impl EvalReport {
    pub fn horizon(&self) -> usize {
        self.accuracy.len()
    }

    fn metric(&self, name: &str) -> &[f64] {
        match name {
            "accuracy" => &self.accuracy,
            "short_term" => &self.short_term,
            _ => &self.long_term,
        }
    }
}

pub const METRICS: [&str; 3] = ["accuracy", "short_term", "long_term"];

pub fn model_hash(model: &DecisionModel) -> String {
    sha256_hex(serde_json::to_string(&model.weights).expect("weights serialize").as_bytes())
}

/// Per-step accuracy of hard decisions on a fresh population rolled forward
/// under `model`.
pub fn rollout_accuracy(scm: &TimeLaggedScm, model: &DecisionModel, n: usize, seed: u64) -> Result<Vec<f64>> {
    let prepared = PreparedInit::new(scm)?;
    let horizon = scm.horizon;
    let w = model.feature_weights();
    let hits: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let s = u8::from(r.random::<f64>() < 0.5);
            let noise = scm.init_noise(&mut r);
            let mut x = prepared.draw(s, &noise);
            let mut out = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let decision = if model.score_unchecked(&x, s) >= 0.0 { 1 } else { -1 };
                let outcome = scm.outcome(&x, s, r.random());
                let u: f64 = r.random();
                out.push(decision == outcome);
                if t + 1 < horizon {
                    x = scm.transition.advance(&x, s, decision, outcome, w, u);
                }
            }
            out
        })
        .collect();
    Ok((0..horizon).map(|t| hits.iter().filter(|h| h[t]).count() as f64 / n as f64).collect())
}

/// Rolls a fresh population forward under `model` and measures per-step
/// accuracy, short-term effect and truncated long-term effect.
pub fn deploy_and_measure(scm: &TimeLaggedScm, model: &DecisionModel, algorithm: &str, n: usize, seed: u64) -> Result<EvalReport> {
    scm.ensure_valid()?;
    if n == 0 {
        return Err(Error::Empty("evaluation population"));
    }
    if model.feature_dim() != scm.feature_dim {
        return Err(Error::Dimension { expected: scm.feature_dim + 2, got: model.weights.len() });
    }
    let accuracy = rollout_accuracy(scm, model, n, rng::derive(seed, "eval/rollout"))?;
    let mut short_term = Vec::with_capacity(scm.horizon);
    let mut long_term = Vec::with_capacity(scm.horizon);
    for t in 1..=scm.horizon {
        short_term.push(effect(scm, model, Mode::ShortTerm(t), n, rng::derive_index(rng::derive(seed, "eval/short"), t as u64))?);
        let truncated = scm.with_horizon(t);
        long_term.push(effect(&truncated, model, Mode::LongTerm, n, rng::derive(seed, "eval/long"))?);
    }
    Ok(EvalReport { algorithm: algorithm.to_string(), seed, n, model_hash: model_hash(model), accuracy, short_term, long_term })
}

fn check_horizons(horizons: impl Iterator<Item = usize>) -> Result<usize> {
    let mut h = None;
    for k in horizons {
        match h {
            None => h = Some(k),
            Some(prev) if prev != k => return Err(Error::Horizon { requested: k, horizon: prev }),
            _ => {}
        }
    }
    h.ok_or(Error::Empty("report list"))
}

/// CSV with one row per `(algorithm, metric)` and one column per step.
pub fn emit_table(reports: &[EvalReport]) -> Result<String> {
    let horizon = check_horizons(reports.iter().map(|r| r.horizon()))?;
    let mut out = String::from("algorithm,metric");
    for t in 1..=horizon {
        out.push_str(&format!(",t{t}"));
    }
    out.push('\n');
    for r in reports {
        for m in METRICS {
            out.push_str(&format!("{},{m}", r.algorithm));
            for v in r.metric(m) {
                out.push_str(&format!(",{v:.3}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Per-step mean and sample standard deviation over replicates.
pub fn mean_std(values: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let k = values.len() as f64;
    let h = values.first().map_or(0, |v| v.len());
    let mean: Vec<f64> = (0..h).map(|t| values.iter().map(|v| v[t]).sum::<f64>() / k).collect();
    let std = (0..h)
        .map(|t| {
            if values.len() < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v[t] - mean[t]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            }
        })
        .collect();
    (mean, std)
}

/// Table of replicate means followed by `_std` columns. Each inner slice
/// holds the replicates of one algorithm.
pub fn emit_replicate_table(groups: &[Vec<EvalReport>]) -> Result<String> {
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Empty("replicate group"));
    }
    let horizon = check_horizons(groups.iter().flatten().map(|r| r.horizon()))?;
    let mut out = String::from("algorithm,metric");
    for t in 1..=horizon {
        out.push_str(&format!(",t{t}"));
    }
    for t in 1..=horizon {
        out.push_str(&format!(",t{t}_std"));
    }
    out.push('\n');
    for g in groups {
        for m in METRICS {
            let vals: Vec<&[f64]> = g.iter().map(|r| r.metric(m)).collect();
            let (mean, std) = mean_std(&vals);
            out.push_str(&format!("{},{m}", g[0].algorithm));
            for v in mean.iter().chain(&std) {
                out.push_str(&format!(",{v:.3}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Least-squares slope of `values` against `t = 1, 2, ...`.
pub fn trend_slope(values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, v)| ((i + 1) as f64, *v)).collect();
    linear_fit(&pts).map(|(s, _)| s)
}
