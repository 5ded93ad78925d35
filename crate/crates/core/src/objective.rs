//! Surrogate-relaxed utility, long-term and short-term fairness losses.
//!
//! All fairness terms replace `P(Y = 1 | x, s)` by the logistic surrogate
//! `phi(-h(x, s))` and are hinged at zero. Expectations are plain means over
//! a [`FrozenBatch`]; reductions run over fixed-size chunks summed in order,
//! so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{add_scaled_features, score_raw, sigmoid, Label};
use crate::scm::{S_MINUS, S_PLUS};

/// Logistic surrogate `phi(z) = ln(1 + e^{-z})`, stable for large `|z|`.
pub fn surrogate(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `phi'(z) = -sigmoid(-z)`.
pub fn surrogate_grad(z: f64) -> f64 {
    -sigmoid(-z)
}

/// Which distribution feeds the `phi(-h(x, s+))` term of the short-term loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShortTermForm {
    /// Both expectations over `X^t(s-)`.
    #[default]
    AsPrinted,
    /// First expectation over `X^t(s+)`, second over `X^t(s-)`.
    PlusDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_l: f64,
    pub lambda_s: f64,
    pub tau_l: f64,
    pub tau_t: f64,
    pub l2_reg: f64,
    #[serde(default)]
    pub short_term_form: ShortTermForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_u: 0.6, lambda_l: 0.2, lambda_s: 0.2, tau_l: 0.0, tau_t: 0.0, l2_reg: 1e-3, short_term_form: ShortTermForm::AsPrinted }
    }
}

impl LossWeights {
    pub fn utility_only(l2_reg: f64) -> Self {
        Self { lambda_u: 1.0, lambda_l: 0.0, lambda_s: 0.0, l2_reg, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_u, self.lambda_l, self.lambda_s, self.tau_l, self.tau_t, self.l2_reg];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights, thresholds and l2_reg must be finite and non-negative".into()));
        }
        let sum = self.lambda_u + self.lambda_l + self.lambda_s;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("lambda_u + lambda_l + lambda_s must be 1, got {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub s: u8,
    pub x: Vec<f64>,
    pub y: Label,
}

/// Samples that stay fixed while one inner problem is solved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrozenBatch {
    /// Observed rows per step `t = 1..=t*`.
    pub utility: Vec<Vec<UtilityRow>>,
    /// Draws of `X^{t*}(s+_pi)`.
    pub longterm_plus: Vec<Vec<f64>>,
    /// Draws of `X^{t*}(s-_pi)`.
    pub longterm_minus: Vec<Vec<f64>>,
    /// Draws of `X^t(s-_{pi^t})` for each step.
    pub shortterm_minus: Vec<Vec<Vec<f64>>>,
    /// Draws of `X^t(s+_{pi^t})` for each step; may be empty.
    pub shortterm_plus: Vec<Vec<Vec<f64>>>,
}

impl FrozenBatch {
    pub fn horizon(&self) -> usize {
        self.utility.len().max(self.shortterm_minus.len())
    }
}

const CHUNK: usize = 2048;

/// Sum of `f(item)` and its gradient over `items`, chunked for determinism.
fn reduce<T: Sync, F>(items: &[T], dim: usize, with_grad: bool, f: F) -> (f64, Vec<f64>)
where
    F: Fn(&T, &mut [f64], bool) -> f64 + Sync,
{
    let partials: Vec<(f64, Vec<f64>)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; if with_grad { dim } else { 0 }];
            let mut v = 0.0;
            for it in chunk {
                v += f(it, &mut g, with_grad);
            }
            (v, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for (v, g) in partials {
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (total, grad)
}

/// Mean of `phi(sign * h(x, s))` over points, with gradient.
fn mean_phi(theta: &[f64], xs: &[Vec<f64>], s: u8, sign: f64, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() {
        return Err(Error::Empty("fairness sample set"));
    }
    let dim = theta.len();
    if xs[0].len() + 2 != dim {
        return Err(Error::Dimension { expected: dim - 2, got: xs[0].len() });
    }
    let (v, mut g) = reduce(xs, dim, with_grad, |x, g, wg| {
        let z = sign * score_raw(theta, x, s);
        if wg {
            add_scaled_features(g, x, s, sign * surrogate_grad(z));
        }
        surrogate(z)
    });
    let n = xs.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok((v / n, g))
}

fn utility_parts(theta: &[f64], batch: &FrozenBatch, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    if batch.utility.is_empty() || batch.utility.iter().any(|rows| rows.is_empty()) {
        return Err(Error::Empty("utility samples"));
    }
    let dim = theta.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for rows in &batch.utility {
        if rows[0].x.len() + 2 != dim {
            return Err(Error::Dimension { expected: dim - 2, got: rows[0].x.len() });
        }
        let (v, g) = reduce(rows, dim, with_grad, |r, g, wg| {
            let y = r.y as f64;
            let z = y * score_raw(theta, &r.x, r.s);
            if wg {
                add_scaled_features(g, &r.x, r.s, y * surrogate_grad(z));
            }
            surrogate(z)
        });
        let n = rows.len() as f64;
        total += v / n;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / n;
        }
    }
    Ok((total, grad))
}

fn longterm_raw(theta: &[f64], batch: &FrozenBatch, tau_l: f64, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let (a, ga) = mean_phi(theta, &batch.longterm_plus, S_MINUS, -1.0, with_grad)?;
    let (b, gb) = mean_phi(theta, &batch.longterm_minus, S_MINUS, 1.0, with_grad)?;
    let raw = 0.5 * (a + b - 1.0 - tau_l);
    let g = ga.iter().zip(&gb).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok((raw, g))
}

fn shortterm_raw(
    theta: &[f64],
    batch: &FrozenBatch,
    t: usize,
    tau_t: f64,
    form: ShortTermForm,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let minus = batch.shortterm_minus.get(t).ok_or(Error::Empty("short-term time slice"))?;
    let first = match form {
        ShortTermForm::AsPrinted => minus,
        ShortTermForm::PlusDistribution => batch.shortterm_plus.get(t).ok_or(Error::Empty("short-term s+ time slice"))?,
    };
    let (a, ga) = mean_phi(theta, first, S_PLUS, -1.0, with_grad)?;
    let (b, gb) = mean_phi(theta, minus, S_MINUS, 1.0, with_grad)?;
    let raw = a + b - 1.0 - tau_t;
    let g = ga.iter().zip(&gb).map(|(x, y)| x + y).collect();
    Ok((raw, g))
}

fn l2(theta: &[f64]) -> f64 {
    theta.iter().map(|v| v * v).sum()
}

/// `sum_t mean phi(y h(x, s)) + l2_reg * |theta|^2`.
pub fn loss_utility(theta: &[f64], batch: &FrozenBatch, l2_reg: f64) -> Result<f64> {
    Ok(utility_parts(theta, batch, false)?.0 + l2_reg * l2(theta))
}

/// Hinged long-term fairness loss.
pub fn loss_longterm(theta: &[f64], batch: &FrozenBatch, tau_l: f64) -> Result<f64> {
    Ok(longterm_raw(theta, batch, tau_l, false)?.0.max(0.0))
}

/// Un-hinged bracket of the long-term loss.
pub fn loss_longterm_raw(theta: &[f64], batch: &FrozenBatch, tau_l: f64) -> Result<f64> {
    Ok(longterm_raw(theta, batch, tau_l, false)?.0)
}

/// Per-step hinged short-term loss averaged over steps.
pub fn loss_shortterm(theta: &[f64], batch: &FrozenBatch, tau_t: f64, form: ShortTermForm) -> Result<f64> {
    let steps = batch.shortterm_minus.len();
    if steps == 0 {
        return Err(Error::Empty("short-term samples"));
    }
    let mut total = 0.0;
    for t in 0..steps {
        total += shortterm_raw(theta, batch, t, tau_t, form, false)?.0.max(0.0);
    }
    Ok(total / steps as f64)
}

/// Per-step un-hinged brackets of the short-term loss.
pub fn loss_shortterm_raw(theta: &[f64], batch: &FrozenBatch, tau_t: f64, form: ShortTermForm) -> Result<Vec<f64>> {
    (0..batch.shortterm_minus.len())
        .map(|t| Ok(shortterm_raw(theta, batch, t, tau_t, form, false)?.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Includes the ridge term.
    pub utility: f64,
    pub longterm: f64,
    pub shortterm: f64,
    pub total: f64,
}

/// Value, gradient and hinge activity of the combined objective
/// `lambda_u l_u + lambda_l l_l + lambda_s l_s + l2_reg |theta|^2`.
fn evaluate(theta: &[f64], batch: &FrozenBatch, w: &LossWeights, with_grad: bool) -> Result<(LossBreakdown, Vec<f64>, Vec<bool>)> {
    let dim = theta.len();
    let mut grad = vec![0.0; dim];
    let mut active = Vec::new();
    let reg = w.l2_reg * l2(theta);
    if with_grad {
        for (g, th) in grad.iter_mut().zip(theta) {
            *g += 2.0 * w.l2_reg * th;
        }
    }

    let mut utility = reg;
    let mut total = reg;
    if w.lambda_u > 0.0 || !batch.utility.is_empty() {
        let (u, gu) = utility_parts(theta, batch, with_grad)?;
        utility += u;
        total += w.lambda_u * u;
        for (g, v) in grad.iter_mut().zip(&gu) {
            *g += w.lambda_u * v;
        }
    }

    let mut longterm = 0.0;
    if w.lambda_l > 0.0 {
        let (raw, gl) = longterm_raw(theta, batch, w.tau_l, with_grad)?;
        active.push(raw > 0.0);
        if raw > 0.0 {
            longterm = raw;
            for (g, v) in grad.iter_mut().zip(&gl) {
                *g += w.lambda_l * v;
            }
        }
        total += w.lambda_l * longterm;
    }

    let mut shortterm = 0.0;
    if w.lambda_s > 0.0 {
        let steps = batch.shortterm_minus.len();
        if steps == 0 {
            return Err(Error::Empty("short-term samples"));
        }
        let scale = 1.0 / steps as f64;
        for t in 0..steps {
            let (raw, gs) = shortterm_raw(theta, batch, t, w.tau_t, w.short_term_form, with_grad)?;
            active.push(raw > 0.0);
            if raw > 0.0 {
                shortterm += scale * raw;
                for (g, v) in grad.iter_mut().zip(&gs) {
                    *g += w.lambda_s * scale * v;
                }
            }
        }
        total += w.lambda_s * shortterm;
    }
    Ok((LossBreakdown { utility, longterm, shortterm, total }, grad, active))
}

pub fn total_loss(theta: &[f64], batch: &FrozenBatch, weights: &LossWeights) -> Result<f64> {
    Ok(evaluate(theta, batch, weights, false)?.0.total)
}

pub fn total_grad(theta: &[f64], batch: &FrozenBatch, weights: &LossWeights) -> Result<Vec<f64>> {
    Ok(evaluate(theta, batch, weights, true)?.1)
}

pub fn loss_breakdown(theta: &[f64], batch: &FrozenBatch, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(evaluate(theta, batch, weights, false)?.0)
}

/// Smooth (away from kinks) objective over a parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(theta)?.0)
    }

    /// Activity of each hinge at `theta`; two points with equal patterns lie
    /// on the same smooth piece.
    fn kink_pattern(&self, _theta: &[f64]) -> Result<Vec<bool>> {
        Ok(Vec::new())
    }
}

/// Combined loss on a frozen batch.
pub struct PerformativeObjective<'a> {
    pub batch: &'a FrozenBatch,
    pub weights: &'a LossWeights,
    pub dim: usize,
}

impl<'a> PerformativeObjective<'a> {
    pub fn new(batch: &'a FrozenBatch, weights: &'a LossWeights, feature_dim: usize) -> Self {
        Self { batch, weights, dim: feature_dim + 2 }
    }
}

impl Objective for PerformativeObjective<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (b, g, _) = evaluate(theta, self.batch, self.weights, true)?;
        Ok((b.total, g))
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        total_loss(theta, self.batch, self.weights)
    }

    fn kink_pattern(&self, theta: &[f64]) -> Result<Vec<bool>> {
        Ok(evaluate(theta, self.batch, self.weights, false)?.2)
    }
}

/// `0.5 theta' A theta - b' theta`, the test seam for solvers and curvature
/// estimators.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub hessian: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
}

impl QuadraticObjective {
    /// `0.5 gamma |theta|^2`.
    pub fn ridge(dim: usize, gamma: f64) -> Self {
        let hessian = (0..dim).map(|i| (0..dim).map(|j| if i == j { gamma } else { 0.0 }).collect()).collect();
        Self { hessian, linear: vec![0.0; dim] }
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ax: Vec<f64> = self.hessian.iter().map(|row| row.iter().zip(theta).map(|(a, t)| a * t).sum()).collect();
        let v = 0.5 * ax.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>()
            - self.linear.iter().zip(theta).map(|(b, t)| b * t).sum::<f64>();
        let g = ax.iter().zip(&self.linear).map(|(a, b)| a - b).collect();
        Ok((v, g))
    }
}
