//! Post-intervention distributions under a path-specific hard intervention
//! on `S` combined with a soft intervention that deploys a decision model on
//! every decision node.
//!
//! Long-term mode carries the hard value along the feature chain
//! `S -> X^1 -> Y^1 -> ... -> X^{t*}` through relevant attributes; every
//! decision sees the reference value of `S`. Short-term mode rolls the chain
//! under the reference value and injects the hard value only into the
//! redlining attributes of `X^t`; the direct edge `S -> Y^t` is handled by
//! the caller when it scores the samples.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, DecisionModel, Label};
use crate::rng;
use crate::scm::{state_index, InitDistribution, PreparedInit, TimeLaggedScm, Transition, S_MINUS, S_PLUS};

/// Which path set carries the hard intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LongTerm,
    /// Paths into the decision at the given step.
    ShortTerm(usize),
}

/// How the deployed model turns scores into decisions inside a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// `P(Y = 1) = sigmoid(h)`.
    #[default]
    Probabilistic,
    /// `Y = 1` iff `h >= 0`.
    Threshold,
}

impl DecisionRule {
    #[inline]
    pub fn prob(self, h: f64) -> f64 {
        match self {
            DecisionRule::Probabilistic => sigmoid(h),
            DecisionRule::Threshold => {
                if h >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    pub mode: Mode,
    pub hard_value: u8,
    /// Value of `S` off the selected paths.
    pub reference_value: u8,
    pub soft_model: DecisionModel,
    pub target_time: usize,
    pub rule: DecisionRule,
}

impl InterventionSpec {
    /// Long-term intervention at the model's horizon, reference value `s-`.
    pub fn long_term(scm: &TimeLaggedScm, hard_value: u8, model: DecisionModel) -> Self {
        Self {
            mode: Mode::LongTerm,
            hard_value,
            reference_value: S_MINUS,
            soft_model: model,
            target_time: scm.horizon,
            rule: DecisionRule::Probabilistic,
        }
    }

    /// Short-term intervention at step `t`, reference value `s-`.
    pub fn short_term(t: usize, hard_value: u8, model: DecisionModel) -> Self {
        Self {
            mode: Mode::ShortTerm(t),
            hard_value,
            reference_value: S_MINUS,
            soft_model: model,
            target_time: t,
            rule: DecisionRule::Probabilistic,
        }
    }

    pub fn with_reference(mut self, reference: u8) -> Self {
        self.reference_value = reference;
        self
    }

    pub fn with_rule(mut self, rule: DecisionRule) -> Self {
        self.rule = rule;
        self
    }

    fn check(&self, scm: &TimeLaggedScm) -> Result<()> {
        if self.target_time == 0 || self.target_time > scm.horizon {
            return Err(Error::Horizon { requested: self.target_time, horizon: scm.horizon });
        }
        match self.mode {
            Mode::LongTerm if self.target_time != scm.horizon => Err(Error::Config(format!(
                "long-term target time {} must equal the horizon {}",
                self.target_time, scm.horizon
            ))),
            Mode::ShortTerm(t) if t != self.target_time => {
                Err(Error::Config(format!("short-term step {t} differs from target time {}", self.target_time)))
            }
            _ if self.hard_value > 1 || self.reference_value > 1 => {
                Err(Error::Config("protected values must be 0 or 1".into()))
            }
            _ if self.soft_model.feature_dim() != scm.feature_dim => {
                Err(Error::Dimension { expected: scm.feature_dim + 2, got: self.soft_model.weights.len() })
            }
            _ => Ok(()),
        }
    }

    /// Feature indices whose value comes from the hard-value world.
    fn hard_components(&self, scm: &TimeLaggedScm) -> Vec<bool> {
        (0..scm.feature_dim)
            .map(|i| match self.mode {
                Mode::LongTerm => scm.partition.is_relevant(i),
                Mode::ShortTerm(_) => scm.partition.is_redlining(i),
            })
            .collect()
    }
}

/// Equally weighted draws of `X^{target_time}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SampleSet {
    fn uniform(points: Vec<Vec<f64>>) -> Self {
        let w = 1.0 / points.len() as f64;
        let weights = vec![w; points.len()];
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Weighted mean of `f` over the samples.
    pub fn mean<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.points.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}

#[inline]
fn merge(hard: &[f64], reference: &[f64], take_hard: &[bool]) -> Vec<f64> {
    hard.iter()
        .zip(reference)
        .zip(take_hard)
        .map(|((h, r), &t)| if t { *h } else { *r })
        .collect()
}

#[inline]
fn decide(rule: DecisionRule, model: &DecisionModel, x: &[f64], s: u8, u: f64) -> Label {
    if u < rule.prob(model.score_unchecked(x, s)) {
        1
    } else {
        -1
    }
}

/// Ancestral sampling of `n` draws of `X^{target_time}`. Draw `i` uses
/// substream `i` of `seed`, so the same seed gives common random numbers
/// across models.
pub fn sample_post_intervention(scm: &TimeLaggedScm, spec: &InterventionSpec, n: usize, seed: u64) -> Result<SampleSet> {
    scm.ensure_valid()?;
    spec.check(scm)?;
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let take_hard = spec.hard_components(scm);
    let all_hard = take_hard.iter().all(|&b| b);
    let none_hard = !take_hard.iter().any(|&b| b);
    if scm.is_discrete() && !(all_hard || none_hard) {
        return Err(Error::Unsupported(
            "table models need every feature on the same side of the path restriction".into(),
        ));
    }
    let prepared = PreparedInit::new(scm)?;
    let points: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            draw_one(scm, spec, &prepared, &take_hard, all_hard, none_hard, &mut r)
        })
        .collect();
    Ok(SampleSet::uniform(points))
}

fn draw_one<R: Rng>(
    scm: &TimeLaggedScm,
    spec: &InterventionSpec,
    prepared: &PreparedInit<'_>,
    take_hard: &[bool],
    all_hard: bool,
    none_hard: bool,
    r: &mut R,
) -> Vec<f64> {
    let model = &spec.soft_model;
    let w = model.feature_weights();
    let (hard, refv, rule) = (spec.hard_value, spec.reference_value, spec.rule);
    let noise = scm.init_noise(r);
    let target = spec.target_time;

    match spec.mode {
        Mode::LongTerm => {
            let mut x_ref = prepared.draw(refv, &noise);
            let mut x_pi = if all_hard {
                prepared.draw(hard, &noise)
            } else if none_hard {
                x_ref.clone()
            } else {
                merge(&prepared.draw(hard, &noise), &x_ref, take_hard)
            };
            for _ in 1..target {
                let (u_dec, u_out, u_tr): (f64, f64, f64) = (r.random(), r.random(), r.random());
                let y_pi = decide(rule, model, &x_pi, refv, u_dec);
                let o_pi = scm.outcome(&x_pi, hard, u_out);
                let next_pi = scm.transition.advance(&x_pi, hard, y_pi, o_pi, w, u_tr);
                if all_hard {
                    x_pi = next_pi;
                } else {
                    let y_ref = decide(rule, model, &x_ref, refv, u_dec);
                    let o_ref = scm.outcome(&x_ref, refv, u_out);
                    let next_ref = scm.transition.advance(&x_ref, refv, y_ref, o_ref, w, u_tr);
                    x_pi = if none_hard { next_ref.clone() } else { merge(&next_pi, &next_ref, take_hard) };
                    x_ref = next_ref;
                }
            }
            x_pi
        }
        Mode::ShortTerm(_) => {
            if target == 1 {
                let x_ref = prepared.draw(refv, &noise);
                return if none_hard {
                    x_ref
                } else {
                    merge(&prepared.draw(hard, &noise), &x_ref, take_hard)
                };
            }
            let mut x = prepared.draw(refv, &noise);
            for k in 1..target {
                let (u_dec, u_out, u_tr): (f64, f64, f64) = (r.random(), r.random(), r.random());
                let y = decide(rule, model, &x, refv, u_dec);
                let o = scm.outcome(&x, refv, u_out);
                let next = scm.transition.advance(&x, refv, y, o, w, u_tr);
                if k + 1 == target && !none_hard {
                    let o_h = scm.outcome(&x, hard, u_out);
                    let next_h = scm.transition.advance(&x, hard, y, o_h, w, u_tr);
                    x = merge(&next_h, &next, take_hard);
                } else {
                    x = next;
                }
            }
            x
        }
    }
}

/// The three group roles of an effect: the two hard values being contrasted
/// and the value used off the selected paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contrast {
    pub plus: u8,
    pub minus: u8,
    pub reference: u8,
}

impl Default for Contrast {
    fn default() -> Self {
        Self { plus: S_PLUS, minus: S_MINUS, reference: S_MINUS }
    }
}

impl Contrast {
    pub fn swapped(self) -> Self {
        Self { plus: self.minus, minus: self.plus, ..self }
    }
}

/// Difference of positive-decision rates for the default contrast
/// (`s+` vs `s-`, reference `s-`).
pub fn effect(scm: &TimeLaggedScm, model: &DecisionModel, mode: Mode, n: usize, seed: u64) -> Result<f64> {
    effect_with(scm, model, mode, Contrast::default(), DecisionRule::Probabilistic, n, seed)
}

/// Long-term: `E[P(1 | X^{t*}(plus), ref)] - E[P(1 | X^{t*}(minus), ref)]`.
/// Short-term at `t`: `E[P(1 | X^t(minus), plus) - P(1 | X^t(minus), minus)]`.
pub fn effect_with(
    scm: &TimeLaggedScm,
    model: &DecisionModel,
    mode: Mode,
    contrast: Contrast,
    rule: DecisionRule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let p = |x: &[f64], s: u8| rule.prob(model.score_unchecked(x, s));
    match mode {
        Mode::LongTerm => {
            let spec = |hard| {
                InterventionSpec::long_term(scm, hard, model.clone())
                    .with_reference(contrast.reference)
                    .with_rule(rule)
            };
            let plus = sample_post_intervention(scm, &spec(contrast.plus), n, seed)?;
            let minus = sample_post_intervention(scm, &spec(contrast.minus), n, seed)?;
            Ok(plus.mean(|x| p(x, contrast.reference)) - minus.mean(|x| p(x, contrast.reference)))
        }
        Mode::ShortTerm(t) => {
            let spec = InterventionSpec::short_term(t, contrast.minus, model.clone())
                .with_reference(contrast.reference)
                .with_rule(rule);
            let xs = sample_post_intervention(scm, &spec, n, seed)?;
            Ok(xs.mean(|x| p(x, contrast.plus) - p(x, contrast.minus)))
        }
    }
}

/// Exact distribution of `X^{target_time}` over a finite state table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    pub states: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl ExactDistribution {
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.states.iter().zip(&self.probs).map(|(x, p)| p * f(x)).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Default bound on the number of enumerated trajectories.
pub const DEFAULT_ENUMERATION_CAP: u128 = 5_000_000;

/// Sums the path-specific inference formula over every trajectory
/// `(x^1, y^1, ..., x^{t})`. Refuses, rather than truncates, when the number
/// of trajectories exceeds `cap`.
pub fn exact_post_intervention(scm: &TimeLaggedScm, spec: &InterventionSpec, cap: u128) -> Result<ExactDistribution> {
    scm.ensure_valid()?;
    spec.check(scm)?;
    let (states, init_probs, next) = match (&scm.init, &scm.transition) {
        (InitDistribution::Table { states, probs }, Transition::Table { next, .. }) => (states, probs, next),
        _ => return Err(Error::Unsupported("exact enumeration needs table init and transition".into())),
    };
    let take_hard = spec.hard_components(scm);
    let all_hard = take_hard.iter().all(|&b| b);
    let none_hard = !take_hard.iter().any(|&b| b);
    if !(all_hard || none_hard) {
        return Err(Error::Unsupported(
            "table models need every feature on the same side of the path restriction".into(),
        ));
    }
    let t = spec.target_time;
    let k = states.len() as u128;
    let size = k
        .checked_pow(t as u32)
        .and_then(|v| v.checked_mul(1u128 << (t - 1).min(127)))
        .unwrap_or(u128::MAX);
    if size > cap {
        return Err(Error::EnumerationCap { size, cap });
    }

    let init_group = match spec.mode {
        Mode::LongTerm if all_hard => spec.hard_value,
        Mode::ShortTerm(1) if all_hard => spec.hard_value,
        _ => spec.reference_value,
    };
    let init = &init_probs[init_group as usize];
    let model = &spec.soft_model;
    let mut probs = vec![0.0; states.len()];

    struct Walk<'a> {
        states: &'a [Vec<f64>],
        next: &'a [[Vec<f64>; 2]],
        model: &'a DecisionModel,
        s: u8,
        rule: DecisionRule,
        target: usize,
    }
    fn walk(w: &Walk<'_>, state: usize, step: usize, weight: f64, out: &mut [f64]) {
        if step == w.target {
            out[state] += weight;
            return;
        }
        let p1 = w.rule.prob(w.model.score_unchecked(&w.states[state], w.s));
        for (j, py) in [(0usize, 1.0 - p1), (1usize, p1)] {
            if py == 0.0 {
                continue;
            }
            for (nx, pt) in w.next[state][j].iter().enumerate() {
                if *pt != 0.0 {
                    walk(w, nx, step + 1, weight * py * pt, out);
                }
            }
        }
    }
    let ctx = Walk { states, next, model, s: spec.reference_value, rule: spec.rule, target: t };
    for (x1, p) in init.iter().enumerate() {
        if *p != 0.0 {
            walk(&ctx, x1, 1, *p, &mut probs);
        }
    }
    Ok(ExactDistribution { states: states.clone(), probs })
}

/// Exact counterpart of [`effect_with`] on table models.
pub fn exact_effect(
    scm: &TimeLaggedScm,
    model: &DecisionModel,
    mode: Mode,
    contrast: Contrast,
    rule: DecisionRule,
    cap: u128,
) -> Result<f64> {
    let p = |x: &[f64], s: u8| rule.prob(model.score_unchecked(x, s));
    match mode {
        Mode::LongTerm => {
            let spec = |hard| {
                InterventionSpec::long_term(scm, hard, model.clone())
                    .with_reference(contrast.reference)
                    .with_rule(rule)
            };
            let plus = exact_post_intervention(scm, &spec(contrast.plus), cap)?;
            let minus = exact_post_intervention(scm, &spec(contrast.minus), cap)?;
            Ok(plus.expect(|x| p(x, contrast.reference)) - minus.expect(|x| p(x, contrast.reference)))
        }
        Mode::ShortTerm(t) => {
            let spec = InterventionSpec::short_term(t, contrast.minus, model.clone())
                .with_reference(contrast.reference)
                .with_rule(rule);
            let dist = exact_post_intervention(scm, &spec, cap)?;
            Ok(dist.expect(|x| p(x, contrast.plus) - p(x, contrast.minus)))
        }
    }
}

/// Index of each sampled point in a state table; panics on foreign points.
pub fn cell_counts(states: &[Vec<f64>], samples: &SampleSet) -> Vec<usize> {
    let mut counts = vec![0usize; states.len()];
    for x in &samples.points {
        counts[state_index(states, x).expect("sample outside the state table")] += 1;
    }
    counts
}
