//! Static baselines trained on the pooled panel: ridge-logistic regression
//! and penalised fairness variants targeting demographic parity and equal
//! opportunity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{add_scaled_features, score_raw, DecisionModel, Label};
use crate::objective::{surrogate, surrogate_grad, Objective};
use crate::panel::PanelDataset;
use crate::trainer::{inner_minimize, InnerOptimizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BaselineKind {
    Lr,
    Fmdp,
    Fmeo,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Lr => "LR",
            BaselineKind::Fmdp => "FMDP",
            BaselineKind::Fmeo => "FMEO",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    #[serde(default)]
    pub fairness_budget: f64,
    #[serde(default)]
    pub penalty_weight: f64,
    #[serde(default = "default_l2")]
    pub l2_reg: f64,
    #[serde(default)]
    pub inner: InnerOptimizer,
}

fn default_l2() -> f64 {
    1e-3
}

/// Surrogate gap of the all-zero score, `2 ln 2 - 1`. Because of the
/// surrogate's offset, pushing the gap below this level means favouring s-
/// rather than removing the disparity.
pub const NEUTRAL_GAP: f64 = 2.0 * std::f64::consts::LN_2 - 1.0;

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        let (fairness_budget, penalty_weight) = if kind == BaselineKind::Lr { (0.0, 0.0) } else { (NEUTRAL_GAP, 10.0) };
        Self { kind, fairness_budget, penalty_weight, l2_reg: default_l2(), inner: InnerOptimizer::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fairness_budget, self.penalty_weight, self.l2_reg];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("baseline budget, penalty and l2_reg must be finite and non-negative".into()));
        }
        Ok(())
    }
}

struct Row<'a> {
    s: u8,
    x: &'a [f64],
    y: Label,
}

struct Pooled<'a> {
    rows: Vec<Row<'a>>,
    /// Rows entering the fairness gap, split by group.
    plus: Vec<usize>,
    minus: Vec<usize>,
    spec: &'a BaselineSpec,
    dim: usize,
}

impl<'a> Pooled<'a> {
    fn new(ds: &'a PanelDataset, spec: &'a BaselineSpec) -> Result<Self> {
        ds.validate()?;
        let mut rows = Vec::with_capacity(ds.len() * ds.steps());
        for i in 0..ds.len() {
            for t in 0..ds.steps() {
                rows.push(Row { s: ds.s[i], x: &ds.x[i][t], y: ds.y[i][t] });
            }
        }
        let eligible = |r: &Row| spec.kind != BaselineKind::Fmeo || r.y == 1;
        let plus: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].s == 1 && eligible(&rows[k])).collect();
        let minus: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].s == 0 && eligible(&rows[k])).collect();
        if spec.kind == BaselineKind::Fmeo && (plus.is_empty() || minus.is_empty()) {
            let group = if plus.is_empty() { "s+" } else { "s-" };
            return Err(Error::Config(format!("equal opportunity needs positive labels in both groups; {group} has none")));
        }
        if spec.kind == BaselineKind::Fmdp && (plus.is_empty() || minus.is_empty()) {
            return Err(Error::Empty("one protected group in the dataset"));
        }
        Ok(Self { rows, plus, minus, spec, dim: ds.feature_dim() + 2 })
    }

    /// Surrogate gap `E_{s+}[phi(-h)] + E_{s-}[phi(h)] - 1` and its gradient.
    fn gap(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.dim];
        let mut total = -1.0;
        for (idx, sign) in [(&self.plus, -1.0), (&self.minus, 1.0)] {
            let n = idx.len() as f64;
            let mut acc = 0.0;
            for &k in idx.iter() {
                let r = &self.rows[k];
                let z = sign * score_raw(theta, r.x, r.s);
                acc += surrogate(z);
                add_scaled_features(&mut g, r.x, r.s, sign * surrogate_grad(z) / n);
            }
            total += acc / n;
        }
        (total, g)
    }
}

impl Objective for Pooled<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.rows.len() as f64;
        let mut grad: Vec<f64> = theta.iter().map(|t| 2.0 * self.spec.l2_reg * t).collect();
        let mut value = self.spec.l2_reg * theta.iter().map(|t| t * t).sum::<f64>();
        let mut acc = 0.0;
        for r in &self.rows {
            let y = r.y as f64;
            let z = y * score_raw(theta, r.x, r.s);
            acc += surrogate(z);
            add_scaled_features(&mut grad, r.x, r.s, y * surrogate_grad(z) / n);
        }
        value += acc / n;
        if self.spec.kind != BaselineKind::Lr && self.spec.penalty_weight > 0.0 {
            let (gap, gg) = self.gap(theta);
            let excess = gap.abs() - self.spec.fairness_budget;
            if excess > 0.0 {
                let mu = self.spec.penalty_weight;
                value += mu * excess * excess;
                let scale = 2.0 * mu * excess * gap.signum();
                for (a, b) in grad.iter_mut().zip(&gg) {
                    *a += scale * b;
                }
            }
        }
        Ok((value, grad))
    }
}

/// Fits a baseline on every `(s, x^t, y^t)` row of the panel with equal weight.
pub fn fit_baseline(dataset: &PanelDataset, spec: &BaselineSpec) -> Result<DecisionModel> {
    spec.validate()?;
    let obj = Pooled::new(dataset, spec)?;
    let res = inner_minimize(&obj, &vec![0.0; obj.dim], &spec.inner)?;
    DecisionModel::new(res.theta)
}

/// Absolute surrogate fairness gap of `model` on the pooled rows that the
/// baseline kind constrains.
pub fn surrogate_gap(dataset: &PanelDataset, spec: &BaselineSpec, model: &DecisionModel) -> Result<f64> {
    let obj = Pooled::new(dataset, spec)?;
    Ok(obj.gap(&model.weights).0.abs())
}

/// Mean training accuracy of hard decisions on the pooled rows.
pub fn pooled_accuracy(dataset: &PanelDataset, model: &DecisionModel) -> Result<f64> {
    dataset.validate()?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for i in 0..dataset.len() {
        for t in 0..dataset.steps() {
            hit += usize::from(model.hard_decision(&dataset.x[i][t], dataset.s[i])? == dataset.y[i][t]);
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Fits the baseline at each penalty weight, returning `(weight, model, gap)`.
pub fn penalty_ladder(dataset: &PanelDataset, spec: &BaselineSpec, weights: &[f64]) -> Result<Vec<(f64, DecisionModel, f64)>> {
    weights
        .iter()
        .map(|&w| {
            let s = BaselineSpec { penalty_weight: w, ..spec.clone() };
            let m = fit_baseline(dataset, &s)?;
            let gap = surrogate_gap(dataset, &s, &m)?;
            Ok((w, m, gap))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_panel() -> PanelDataset {
        PanelDataset {
            s: vec![0, 0, 1, 1],
            x: vec![vec![vec![-1.0]], vec![vec![0.5]], vec![vec![1.0]], vec![vec![-0.2]]],
            y: vec![vec![-1], vec![1], vec![1], vec![-1]],
            decisions: vec![vec![-1], vec![1], vec![1], vec![-1]],
        }
    }

    #[test]
    fn fmeo_without_positives_is_an_error() {
        let mut ds = small_panel();
        ds.y[1][0] = -1;
        let err = fit_baseline(&ds, &BaselineSpec::new(BaselineKind::Fmeo)).unwrap_err();
        assert!(err.to_string().contains("s-"), "{err}");
    }

    #[test]
    fn zero_penalty_is_lr() {
        let ds = small_panel();
        let lr = fit_baseline(&ds, &BaselineSpec::new(BaselineKind::Lr)).unwrap();
        let dp = fit_baseline(&ds, &BaselineSpec { penalty_weight: 0.0, ..BaselineSpec::new(BaselineKind::Fmdp) }).unwrap();
        for (a, b) in lr.weights.iter().zip(&dp.weights) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn negative_budget_rejected() {
        let spec = BaselineSpec { fairness_budget: -1.0, ..BaselineSpec::new(BaselineKind::Fmdp) };
        assert!(fit_baseline(&small_panel(), &spec).is_err());
    }
}
