//! Linear decision model `h(x, s) = w_x . x + w_s s + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary label or decision, `+1` or `-1`.
pub type Label = i8;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Affine scorer over `(x, s)`; weights are laid out as
/// `[w_x[0], .., w_x[d-1], w_s, bias]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionModel {
    pub weights: Vec<f64>,
}

impl DecisionModel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 3 {
            return Err(Error::Config(format!(
                "a decision model needs at least 3 weights (one feature, s, bias), got {}",
                weights.len()
            )));
        }
        Ok(Self { weights })
    }

    pub fn zeros(feature_dim: usize) -> Self {
        Self { weights: vec![0.0; feature_dim + 2] }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len() - 2
    }

    pub fn feature_weights(&self) -> &[f64] {
        &self.weights[..self.feature_dim()]
    }

    pub fn protected_weight(&self) -> f64 {
        self.weights[self.feature_dim()]
    }

    pub fn bias(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }

    pub fn score(&self, x: &[f64], s: u8) -> Result<f64> {
        if x.len() != self.feature_dim() {
            return Err(Error::Dimension { expected: self.feature_dim(), got: x.len() });
        }
        Ok(self.score_unchecked(x, s))
    }

    /// Hot-loop variant of [`score`](Self::score); `x` must have `feature_dim` entries.
    #[inline]
    pub fn score_unchecked(&self, x: &[f64], s: u8) -> f64 {
        score_raw(&self.weights, x, s)
    }

    pub fn decision_prob(&self, x: &[f64], s: u8) -> Result<f64> {
        self.score(x, s).map(sigmoid)
    }

    /// Deployment rule: `+1` iff the score is non-negative.
    pub fn hard_decision(&self, x: &[f64], s: u8) -> Result<Label> {
        self.score(x, s).map(|h| if h >= 0.0 { 1 } else { -1 })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { weights: self.weights.iter().map(|w| w * factor).collect() }
    }
}

/// Score with a raw weight slice, shared by the objective and the samplers.
#[inline]
pub(crate) fn score_raw(weights: &[f64], x: &[f64], s: u8) -> f64 {
    let d = x.len();
    let mut h = weights[d + 1] + weights[d] * s as f64;
    for (w, xi) in weights[..d].iter().zip(x) {
        h += w * xi;
    }
    h
}

/// Writes `scale * (x, s, 1)` into `out`.
#[inline]
pub(crate) fn add_scaled_features(out: &mut [f64], x: &[f64], s: u8, scale: f64) {
    let d = x.len();
    for (o, xi) in out[..d].iter_mut().zip(x) {
        *o += scale * xi;
    }
    out[d] += scale * s as f64;
    out[d + 1] += scale;
}
