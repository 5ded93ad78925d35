//! Repeated risk minimization: resample the post-intervention distributions
//! under the current model, minimize the loss on that frozen batch, repeat
//! until the parameters stop moving.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{sample_post_intervention, InterventionSpec};
use crate::model::DecisionModel;
use crate::objective::{loss_breakdown, FrozenBatch, LossWeights, Objective, PerformativeObjective, UtilityRow};
use crate::panel::PanelDataset;
use crate::rng;
use crate::scm::{TimeLaggedScm, S_MINUS, S_PLUS};

/// Full-batch gradient descent with Barzilai-Borwein trial steps and
/// Armijo backtracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptimizer {
    pub initial_step: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    #[serde(default = "default_armijo")]
    pub armijo: f64,
}

fn default_armijo() -> f64 {
    1e-4
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        Self { initial_step: 1.0, max_steps: 5000, grad_tol: 1e-7, armijo: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub steps: usize,
    /// Every accepted objective value, starting with the initial point.
    pub values: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn inner_minimize<O: Objective + ?Sized>(obj: &O, theta_init: &[f64], spec: &InnerOptimizer) -> Result<InnerResult> {
    if theta_init.len() != obj.dim() {
        return Err(Error::Dimension { expected: obj.dim(), got: theta_init.len() });
    }
    if theta_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { steps: 0 });
    }
    let mut theta = theta_init.to_vec();
    let (mut value, mut grad) = obj.value_and_grad(&theta)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { steps: 0 });
    }
    let mut values = vec![value];
    let mut alpha = spec.initial_step;
    let mut steps = 0;
    while steps < spec.max_steps {
        let gn2: f64 = grad.iter().map(|g| g * g).sum();
        if gn2.sqrt() <= spec.grad_tol {
            break;
        }
        let mut step = alpha;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let v = obj.value(&cand)?;
            if v.is_finite() && v <= value - spec.armijo * step * gn2 {
                accepted = Some(cand);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };
        let (v, g) = obj.value_and_grad(&next)?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { steps });
        }
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { step };
        let moved = norm(&s);
        theta = next;
        value = v;
        grad = g;
        values.push(value);
        steps += 1;
        if moved <= 1e-15 * (1.0 + norm(&theta)) {
            break;
        }
    }
    Ok(InnerResult { grad_norm: norm(&grad), theta, value, steps, values })
}

/// How the Monte Carlo batch of each outer iteration is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// The same substreams every iteration, so batches differ only through
    /// the model.
    #[default]
    Common,
    /// Substreams indexed by the outer iteration.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmConfig {
    pub delta: f64,
    pub max_outer_iters: usize,
    #[serde(default)]
    pub inner: InnerOptimizer,
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for RrmConfig {
    fn default() -> Self {
        Self { delta: 1e-4, max_outer_iters: 50, inner: InnerOptimizer::default(), mc_samples: 10_000, seed: 0, sampling: Sampling::Common }
    }
}

impl RrmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || self.max_outer_iters == 0 || self.mc_samples == 0 || self.inner.max_steps == 0 {
            return Err(Error::Config("rrm needs delta > 0 and caps >= 1".into()));
        }
        if !(self.inner.initial_step > 0.0) || !(self.inner.grad_tol >= 0.0) {
            return Err(Error::Config("inner optimizer needs a positive step and non-negative tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Parameters produced by this iteration.
    pub theta: Vec<f64>,
    pub utility: f64,
    pub longterm: f64,
    pub shortterm: f64,
    pub total: f64,
    pub delta: f64,
    pub inner_steps: usize,
    pub grad_norm: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RrmTrace {
    pub initial_theta: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Iteration at which `delta` first fell below the threshold.
    pub converged_at: Option<usize>,
}

impl RrmTrace {
    pub fn deltas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta).collect()
    }

    pub fn cap_hit(&self) -> bool {
        !self.converged
    }
}

/// Dataset rows grouped by step.
pub fn utility_rows(dataset: &PanelDataset) -> Vec<Vec<UtilityRow>> {
    (0..dataset.steps())
        .map(|t| {
            (0..dataset.len())
                .map(|i| UtilityRow { s: dataset.s[i], x: dataset.x[i][t].clone(), y: dataset.y[i][t] })
                .collect()
        })
        .collect()
}

/// Batch built from the dataset alone: long-term sets are the last observed
/// step split by group, short-term sets are every observed step.
pub fn observational_batch(dataset: &PanelDataset) -> Result<FrozenBatch> {
    dataset.validate()?;
    let last = dataset.steps() - 1;
    let group = |g: u8| -> Vec<Vec<f64>> {
        (0..dataset.len()).filter(|&i| dataset.s[i] == g).map(|i| dataset.x[i][last].clone()).collect()
    };
    let (plus, minus) = (group(S_PLUS), group(S_MINUS));
    if plus.is_empty() || minus.is_empty() {
        return Err(Error::Empty("one protected group in the dataset"));
    }
    let steps: Vec<Vec<Vec<f64>>> =
        (0..dataset.steps()).map(|t| dataset.x.iter().map(|xi| xi[t].clone()).collect()).collect();
    Ok(FrozenBatch {
        utility: utility_rows(dataset),
        longterm_plus: plus,
        longterm_minus: minus,
        shortterm_minus: steps.clone(),
        shortterm_plus: steps,
    })
}

/// Initial model trained on the observed data without any intervention.
pub fn init_model(dataset: &PanelDataset, weights: &LossWeights, inner: &InnerOptimizer) -> Result<DecisionModel> {
    weights.validate()?;
    let batch = observational_batch(dataset)?;
    let d = dataset.feature_dim();
    let ys = dataset.y.iter().flatten();
    if ys.clone().all(|&y| y == 1) || ys.clone().all(|&y| y == -1) {
        eprintln!("warning: every label in the dataset has the same class");
    }
    let obj = PerformativeObjective::new(&batch, weights, d);
    let res = inner_minimize(&obj, &vec![0.0; d + 2], inner)?;
    DecisionModel::new(res.theta)
}

fn sample_seed(cfg: &RrmConfig, label: &str, iteration: usize) -> u64 {
    let base = rng::derive(cfg.seed, label);
    match cfg.sampling {
        Sampling::Common => base,
        Sampling::Fresh => rng::derive_index(base, iteration as u64),
    }
}

/// Post-intervention batch under `model`, with `utility` rows attached.
pub fn sample_batch(
    scm: &TimeLaggedScm,
    model: &DecisionModel,
    utility: Vec<Vec<UtilityRow>>,
    cfg: &RrmConfig,
    iteration: usize,
) -> Result<FrozenBatch> {
    let n = cfg.mc_samples;
    let lt_seed = sample_seed(cfg, "rrm/longterm", iteration);
    let long = |hard| -> Result<Vec<Vec<f64>>> {
        let spec = InterventionSpec::long_term(scm, hard, model.clone());
        Ok(sample_post_intervention(scm, &spec, n, lt_seed)?.points)
    };
    let longterm_plus = long(S_PLUS)?;
    let longterm_minus = long(S_MINUS)?;
    let mut shortterm_minus = Vec::with_capacity(scm.horizon);
    let mut shortterm_plus = Vec::with_capacity(scm.horizon);
    for t in 1..=scm.horizon {
        let seed = rng::derive_index(sample_seed(cfg, "rrm/shortterm", iteration), t as u64);
        let short = |hard| -> Result<Vec<Vec<f64>>> {
            let spec = InterventionSpec::short_term(t, hard, model.clone());
            Ok(sample_post_intervention(scm, &spec, n, seed)?.points)
        };
        shortterm_minus.push(short(S_MINUS)?);
        shortterm_plus.push(short(S_PLUS)?);
    }
    Ok(FrozenBatch { utility, longterm_plus, longterm_minus, shortterm_minus, shortterm_plus })
}

/// Runs repeated risk minimization from the observational initial model.
pub fn rrm_fit(scm: &TimeLaggedScm, dataset: &PanelDataset, weights: &LossWeights, cfg: &RrmConfig) -> Result<(DecisionModel, RrmTrace)> {
    let theta0 = init_model(dataset, weights, &cfg.inner)?;
    rrm_fit_from(scm, dataset, weights, cfg, theta0)
}

pub fn rrm_fit_from(
    scm: &TimeLaggedScm,
    dataset: &PanelDataset,
    weights: &LossWeights,
    cfg: &RrmConfig,
    start: DecisionModel,
) -> Result<(DecisionModel, RrmTrace)> {
    scm.ensure_valid()?;
    weights.validate()?;
    cfg.validate()?;
    dataset.validate()?;
    if dataset.feature_dim() != scm.feature_dim || start.feature_dim() != scm.feature_dim {
        return Err(Error::Dimension { expected: scm.feature_dim, got: dataset.feature_dim() });
    }
    let utility = utility_rows(dataset);
    let mut model = start;
    let mut trace = RrmTrace { initial_theta: model.weights.clone(), ..Default::default() };
    for i in 1..=cfg.max_outer_iters {
        let clock = Instant::now();
        let batch = sample_batch(scm, &model, utility.clone(), cfg, i)?;
        let obj = PerformativeObjective::new(&batch, weights, scm.feature_dim);
        let res = match inner_minimize(&obj, &model.weights, &cfg.inner) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { iteration: i, trace: Box::new(trace) }),
            Err(e) => return Err(e),
        };
        let parts = loss_breakdown(&res.theta, &batch, weights)?;
        let delta = dist(&res.theta, &model.weights);
        trace.records.push(IterationRecord {
            iteration: i,
            theta: res.theta.clone(),
            utility: parts.utility,
            longterm: parts.longterm,
            shortterm: parts.shortterm,
            total: parts.total,
            delta,
            inner_steps: res.steps,
            grad_norm: res.grad_norm,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
        model = DecisionModel::new(res.theta)?;
        if delta < cfg.delta {
            trace.converged = true;
            trace.converged_at = Some(i);
            break;
        }
    }
    Ok((model, trace))
}

/// Least-squares fit of `ln(delta_i)` against `i`: `(slope, r_squared)`.
/// Non-positive deltas are skipped.
pub fn log_linear_fit(deltas: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> =
        deltas.iter().enumerate().filter(|(_, d)| **d > 0.0).map(|(i, d)| ((i + 1) as f64, d.ln())).collect();
    linear_fit(&pts)
}

/// Ordinary least squares `(slope, r_squared)`; `None` for fewer than two
/// distinct abscissae.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, r2))
}
