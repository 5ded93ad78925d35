//! Time-lagged structural causal model of a sequential decision process.
//!
//! The graph is fixed: `S -> X^1`, `S -> Y^t`, `X^t -> Y^t`, and
//! `(X^t, Y^t) -> X^{t+1}` for every step. What varies between models is the
//! initial feature distribution, the (time-homogeneous) transition and the
//! role each feature plays on the causal paths.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, DecisionModel, Label};

/// Protected-group value of the advantaged group.
pub const S_PLUS: u8 = 1;
/// Protected-group value of the protected group.
pub const S_MINUS: u8 = 0;

/// Feature roles. Every index is either relevant or irrelevant; redlining
/// indices are a subset of the relevant ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub relevant: Vec<usize>,
    #[serde(default)]
    pub irrelevant: Vec<usize>,
    #[serde(default)]
    pub redlining: Vec<usize>,
}

impl Partition {
    pub fn all_relevant(feature_dim: usize) -> Self {
        Self { relevant: (0..feature_dim).collect(), irrelevant: vec![], redlining: vec![] }
    }

    pub fn is_relevant(&self, i: usize) -> bool {
        self.relevant.contains(&i)
    }

    pub fn is_redlining(&self, i: usize) -> bool {
        self.redlining.contains(&i)
    }
}

/// `P(X^1 | S)`. Group-indexed arrays are `[s-, s+]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitDistribution {
    Gaussian { means: [Vec<f64>; 2], covs: [Vec<Vec<f64>>; 2] },
    /// Uniform draw from an observed seed population of each group.
    Empirical { groups: [Vec<Vec<f64>>; 2] },
    /// Finite support shared by both groups.
    Table { states: Vec<Vec<f64>>, probs: [Vec<f64>; 2] },
}

/// `P(X^{t+1} | X^t, Y^t)`, identical at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    /// Lending feedback rule. With `b = s*b1 + (1-s)*b0` and `w` the feature
    /// weights of the deployed model:
    /// approved and repaid: `x + eps*w + b`; approved and defaulted:
    /// `x - eps*w + b`; rejected: `x + b`.
    Feedback { eps: f64, b0: f64, b1: f64 },
    /// `next[i][j]` is the distribution of the next state index given state
    /// `i` and decision `j` (`0` for -1, `1` for +1).
    Table { states: Vec<Vec<f64>>, next: Vec<[Vec<f64>; 2]> },
}

impl Transition {
    pub fn is_frozen(&self) -> bool {
        matches!(self, Transition::Feedback { eps, b0, b1 } if *eps == 0.0 && *b0 == 0.0 && *b1 == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeLaggedScm {
    pub feature_dim: usize,
    pub horizon: usize,
    pub init: InitDistribution,
    pub transition: Transition,
    pub truth_model: DecisionModel,
    pub partition: Partition,
}

/// One broken invariant of a [`TimeLaggedScm`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositive(&'static str),
    MissingIndex(usize),
    DuplicateIndex(usize),
    IndexOutOfRange(usize),
    RedliningNotRelevant(usize),
    TruthModelDimension { expected: usize, got: usize },
    Init(String),
    Transition(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositive(field) => write!(f, "{field} must be at least 1"),
            Violation::MissingIndex(i) => write!(f, "feature index {i} is not assigned a role"),
            Violation::DuplicateIndex(i) => {
                write!(f, "feature index {i} is both relevant and irrelevant (or listed twice)")
            }
            Violation::IndexOutOfRange(i) => write!(f, "feature index {i} is out of range"),
            Violation::RedliningNotRelevant(i) => {
                write!(f, "redlining feature {i} is not relevant (redlining must be a subset of relevant)")
            }
            Violation::TruthModelDimension { expected, got } => {
                write!(f, "truth model has {got} weights, expected {expected}")
            }
            Violation::Init(m) => write!(f, "init distribution: {m}"),
            Violation::Transition(m) => write!(f, "transition: {m}"),
        }
    }
}

const PROB_TOL: f64 = 1e-9;

fn check_probs(p: &[f64], what: &str, out: &mut Vec<String>) {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        out.push(format!("{what} has negative or non-finite entries"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        out.push(format!("{what} sums to {total}, not 1"));
    }
}

impl TimeLaggedScm {
    /// Every invariant violation; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let d = self.feature_dim;
        if d == 0 {
            v.push(Violation::NonPositive("feature_dim"));
        }
        if self.horizon == 0 {
            v.push(Violation::NonPositive("horizon"));
        }

        let mut seen = BTreeSet::new();
        for &i in self.partition.relevant.iter().chain(&self.partition.irrelevant) {
            if i >= d {
                v.push(Violation::IndexOutOfRange(i));
            } else if !seen.insert(i) {
                v.push(Violation::DuplicateIndex(i));
            }
        }
        for i in 0..d {
            if !seen.contains(&i) {
                v.push(Violation::MissingIndex(i));
            }
        }
        for &i in &self.partition.redlining {
            if i >= d {
                v.push(Violation::IndexOutOfRange(i));
            } else if !self.partition.is_relevant(i) {
                v.push(Violation::RedliningNotRelevant(i));
            }
        }

        if self.truth_model.weights.len() != d + 2 {
            v.push(Violation::TruthModelDimension { expected: d + 2, got: self.truth_model.weights.len() });
        }

        let mut init_msgs = Vec::new();
        match &self.init {
            InitDistribution::Gaussian { means, covs } => {
                for g in 0..2 {
                    if means[g].len() != d {
                        init_msgs.push(format!("group {g} mean has length {}, expected {d}", means[g].len()));
                    }
                    if let Err(e) = cholesky(&covs[g], d) {
                        init_msgs.push(format!("group {g} covariance: {e}"));
                    }
                }
            }
            InitDistribution::Empirical { groups } => {
                for (g, rows) in groups.iter().enumerate() {
                    if rows.is_empty() {
                        init_msgs.push(format!("group {g} has no seed rows"));
                    }
                    if rows.iter().any(|r| r.len() != d) {
                        init_msgs.push(format!("group {g} has rows of the wrong dimension"));
                    }
                }
            }
            InitDistribution::Table { states, probs } => {
                check_states(states, d, &mut init_msgs);
                for g in 0..2 {
                    if probs[g].len() != states.len() {
                        init_msgs.push(format!("group {g} table has {} entries for {} states", probs[g].len(), states.len()));
                    }
                    check_probs(&probs[g], &format!("group {g} table"), &mut init_msgs);
                }
            }
        }
        v.extend(init_msgs.into_iter().map(Violation::Init));

        let mut tr_msgs = Vec::new();
        match &self.transition {
            Transition::Feedback { eps, b0, b1 } => {
                if !(*eps >= 0.0 && eps.is_finite()) {
                    tr_msgs.push(format!("eps must be a finite non-negative number, got {eps}"));
                }
                if !b0.is_finite() || !b1.is_finite() {
                    tr_msgs.push("base increments must be finite".into());
                }
            }
            Transition::Table { states, next } => {
                check_states(states, d, &mut tr_msgs);
                if next.len() != states.len() {
                    tr_msgs.push(format!("{} rows for {} states", next.len(), states.len()));
                }
                for (i, row) in next.iter().enumerate() {
                    for (j, p) in row.iter().enumerate() {
                        if p.len() != states.len() {
                            tr_msgs.push(format!("row ({i},{j}) has {} entries", p.len()));
                        }
                        check_probs(p, &format!("row ({i},{j})"), &mut tr_msgs);
                    }
                }
                if let InitDistribution::Table { states: init_states, .. } = &self.init {
                    if init_states != states {
                        tr_msgs.push("table transition and table init must share the same states".into());
                    }
                } else {
                    tr_msgs.push("a table transition requires a table init distribution".into());
                }
            }
        }
        v.extend(tr_msgs.into_iter().map(Violation::Transition));
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidScm(v.iter().map(|x| x.to_string()).collect()))
        }
    }

    /// `true` when both the init and the transition are finite tables.
    pub fn is_discrete(&self) -> bool {
        matches!(
            (&self.init, &self.transition),
            (InitDistribution::Table { .. }, Transition::Table { .. })
        )
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..self.clone() }
    }

    /// Draws the exogenous noise of `X^1`.
    pub(crate) fn init_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> InitNoise {
        match &self.init {
            InitDistribution::Gaussian { .. } => InitNoise::Normal(
                (0..self.feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            ),
            _ => InitNoise::Uniform(rng.random::<f64>()),
        }
    }

    /// Outcome (repayment) label from the ground-truth model.
    #[inline]
    pub(crate) fn outcome(&self, x: &[f64], s: u8, u: f64) -> Label {
        if u < sigmoid(self.truth_model.score_unchecked(x, s)) {
            1
        } else {
            -1
        }
    }
}

fn check_states(states: &[Vec<f64>], d: usize, out: &mut Vec<String>) {
    if states.is_empty() {
        out.push("empty state table".into());
    }
    if states.iter().any(|s| s.len() != d) {
        out.push("state of the wrong dimension".into());
    }
    for (i, a) in states.iter().enumerate() {
        if states[..i].contains(a) {
            out.push(format!("state {i} is duplicated"));
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum InitNoise {
    Normal(Vec<f64>),
    Uniform(f64),
}

/// Init distribution with covariance factors precomputed.
pub(crate) struct PreparedInit<'a> {
    init: &'a InitDistribution,
    chol: Option<[Vec<Vec<f64>>; 2]>,
}

impl<'a> PreparedInit<'a> {
    pub(crate) fn new(scm: &'a TimeLaggedScm) -> Result<Self> {
        let chol = match &scm.init {
            InitDistribution::Gaussian { covs, .. } => Some([
                cholesky(&covs[0], scm.feature_dim).map_err(Error::Config)?,
                cholesky(&covs[1], scm.feature_dim).map_err(Error::Config)?,
            ]),
            _ => None,
        };
        Ok(Self { init: &scm.init, chol })
    }

    /// Structural equation `X^1 = f(s, U)`.
    pub(crate) fn draw(&self, s: u8, noise: &InitNoise) -> Vec<f64> {
        let g = s as usize;
        match (self.init, noise) {
            (InitDistribution::Gaussian { means, .. }, InitNoise::Normal(z)) => {
                let l = &self.chol.as_ref().expect("gaussian factors")[g];
                means[g]
                    .iter()
                    .enumerate()
                    .map(|(i, m)| m + l[i].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            }
            (InitDistribution::Empirical { groups }, InitNoise::Uniform(u)) => {
                let rows = &groups[g];
                let k = ((u * rows.len() as f64) as usize).min(rows.len() - 1);
                rows[k].clone()
            }
            (InitDistribution::Table { states, probs }, InitNoise::Uniform(u)) => {
                states[categorical(&probs[g], *u)].clone()
            }
            _ => unreachable!("noise kind matches the init distribution"),
        }
    }
}

impl Transition {
    /// Structural equation for `X^{t+1}`. `deployed_w` are the feature
    /// weights of the model currently making decisions.
    pub(crate) fn advance(
        &self,
        x: &[f64],
        s: u8,
        decision: Label,
        outcome: Label,
        deployed_w: &[f64],
        u: f64,
    ) -> Vec<f64> {
        match self {
            Transition::Feedback { eps, b0, b1 } => {
                let b = if s == S_PLUS { *b1 } else { *b0 };
                let sign = match (decision, outcome) {
                    (1, 1) => 1.0,
                    (1, _) => -1.0,
                    _ => 0.0,
                };
                x.iter().zip(deployed_w).map(|(xi, wi)| xi + sign * eps * wi + b).collect()
            }
            Transition::Table { states, next } => {
                let i = state_index(states, x).expect("table state");
                let j = usize::from(decision == 1);
                states[categorical(&next[i][j], u)].clone()
            }
        }
    }
}

pub(crate) fn state_index(states: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    states.iter().position(|s| s.as_slice() == x)
}

/// Inverse-CDF draw.
pub(crate) fn categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap at the top; take the last non-empty cell
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
pub(crate) fn cholesky(a: &[Vec<f64>], d: usize) -> std::result::Result<Vec<Vec<f64>>, String> {
    if a.len() != d || a.iter().any(|r| r.len() != d) {
        return Err(format!("expected a {d}x{d} matrix"));
    }
    for i in 0..d {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return Err("matrix is not symmetric".into());
            }
        }
    }
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if v < -1e-10 * (1.0 + a[i][i].abs()) {
                    return Err("matrix is not positive semidefinite".into());
                }
                l[i][j] = v.max(0.0).sqrt();
            } else if l[j][j] > 0.0 {
                l[i][j] = (a[i][j] - s) / l[j][j];
            } else if (a[i][j] - s).abs() > 1e-10 {
                return Err("matrix is not positive semidefinite".into());
            }
        }
    }
    Ok(l)
}

pub(crate) fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Lending model with group Gaussians at `-1` (protected) and `+1`
/// (advantaged) and identity covariance.
pub fn lending_scm(feature_dim: usize, horizon: usize, eps: f64, b0: f64, b1: f64, truth: DecisionModel) -> TimeLaggedScm {
    TimeLaggedScm {
        feature_dim,
        horizon,
        init: InitDistribution::Gaussian {
            means: [vec![-1.0; feature_dim], vec![1.0; feature_dim]],
            covs: [identity(feature_dim), identity(feature_dim)],
        },
        transition: Transition::Feedback { eps, b0, b1 },
        truth_model: truth,
        partition: Partition::all_relevant(feature_dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> TimeLaggedScm {
        lending_scm(2, 5, 0.5, 0.2, 1.0, DecisionModel::new(vec![1.0, 0.5, 0.2, -0.1]).unwrap())
    }

    #[test]
    fn reference_model_is_valid() {
        assert!(reference().validate().is_empty());
        reference().ensure_valid().unwrap();
    }

    #[test]
    fn missing_index_is_named() {
        let mut scm = lending_scm(4, 2, 0.5, 0.2, 1.0, DecisionModel::zeros(4));
        scm.partition.relevant = vec![0, 1, 2];
        let v = scm.validate();
        assert_eq!(v, vec![Violation::MissingIndex(3)]);
        assert!(v[0].to_string().contains('3'));
    }

    #[test]
    fn redlining_must_be_relevant() {
        let mut scm = reference();
        scm.partition = Partition { relevant: vec![0], irrelevant: vec![1], redlining: vec![1] };
        let v = scm.validate();
        assert_eq!(v, vec![Violation::RedliningNotRelevant(1)]);
        assert!(v[0].to_string().contains("subset of relevant"));
    }

    #[test]
    fn nonpositive_dims_and_bad_covariance() {
        let mut scm = reference();
        scm.horizon = 0;
        if let InitDistribution::Gaussian { covs, .. } = &mut scm.init {
            covs[1] = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        }
        let v = scm.validate();
        assert!(v.contains(&Violation::NonPositive("horizon")));
        assert!(v.iter().any(|x| matches!(x, Violation::Init(m) if m.contains("semidefinite"))));
    }

    #[test]
    fn feedback_branches() {
        let t = Transition::Feedback { eps: 0.5, b0: 0.2, b1: 1.0 };
        let w = [2.0, -1.0];
        assert_eq!(t.advance(&[0.0, 0.0], 1, 1, 1, &w, 0.0), vec![2.0, 0.5]);
        assert_eq!(t.advance(&[0.0, 0.0], 1, 1, -1, &w, 0.0), vec![0.0, 1.5]);
        assert_eq!(t.advance(&[0.0, 0.0], 0, -1, 1, &w, 0.0), vec![0.2, 0.2]);
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = vec![vec![4.0, 2.0], vec![2.0, 3.0]];
        let l = cholesky(&a, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn categorical_edges() {
        assert_eq!(categorical(&[0.5, 0.5], 0.0), 0);
        assert_eq!(categorical(&[0.5, 0.5], 0.5), 1);
        assert_eq!(categorical(&[0.3, 0.7, 0.0], 1.0 - 1e-17), 1);
    }
}
