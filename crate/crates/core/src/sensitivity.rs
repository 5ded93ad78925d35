//! Empirical constants of the convergence analysis: distribution and
//! attribute sensitivity, curvature of the loss, and the stability predicate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{cell_counts, exact_post_intervention, sample_post_intervention, InterventionSpec, Mode, DEFAULT_ENUMERATION_CAP};
use crate::model::{sigmoid, DecisionModel};
use crate::objective::Objective;
use crate::scm::{TimeLaggedScm, Transition};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `W1` between two weighted point sets on the real line, as the integral of
/// the absolute CDF difference.
pub fn w1_1d(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let mut ev: Vec<(f64, f64)> = a.iter().zip(wa).map(|(x, w)| (*x, *w)).collect();
    ev.extend(b.iter().zip(wb).map(|(x, w)| (*x, -*w)));
    ev.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut total = 0.0;
    let mut diff = 0.0;
    for k in 0..ev.len() {
        diff += ev[k].1;
        if k + 1 < ev.len() {
            total += diff.abs() * (ev[k + 1].0 - ev[k].0);
        }
    }
    total
}

/// `W1` between two equally weighted samples on the real line.
pub fn w1_samples_1d(a: &[f64], b: &[f64]) -> f64 {
    let wa = vec![1.0 / a.len() as f64; a.len()];
    let wb = vec![1.0 / b.len() as f64; b.len()];
    w1_1d(a, &wa, b, &wb)
}

const FLOW_TOL: f64 = 1e-15;

/// Exact optimal transport cost between two discrete distributions with
/// Euclidean ground cost, by successive shortest augmenting paths.
pub fn transport_w1(a: &[Vec<f64>], wa: &[f64], b: &[Vec<f64>], wb: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || a.len() != wa.len() || b.len() != wb.len() {
        return Err(Error::Empty("transport marginal"));
    }
    let (sa, sb) = (wa.iter().sum::<f64>(), wb.iter().sum::<f64>());
    if wa.iter().chain(wb).any(|w| *w < 0.0 || !w.is_finite()) || (sa - sb).abs() > 1e-9 * sa.max(1.0) {
        return Err(Error::Config("transport marginals must be non-negative with equal mass".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| euclid(x, y)).collect()).collect();
    let mut supply = wa.to_vec();
    let mut demand = wb.to_vec();
    let mut flow = vec![vec![0.0; nb]; na];
    // node ids: left 0..na, right na..na+nb, sink na+nb; the source is implicit
    let n = na + nb + 1;
    let sink = na + nb;
    let mut pot = vec![0.0; n];
    loop {
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut any = false;
        for i in 0..na {
            if supply[i] > FLOW_TOL {
                dist[i] = 0.0;
                any = true;
            }
        }
        if !any {
            break;
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX || u == sink {
                break;
            }
            done[u] = true;
            let relax = |v: usize, c: f64, dist: &mut [f64], prev: &mut [usize]| {
                let nd = best + (c + pot[u] - pot[v]).max(0.0);
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                }
            };
            if u < na {
                for j in 0..nb {
                    relax(na + j, cost[u][j], &mut dist, &mut prev);
                }
            } else {
                let j = u - na;
                for i in 0..na {
                    if flow[i][j] > FLOW_TOL {
                        relax(i, -cost[i][j], &mut dist, &mut prev);
                    }
                }
                if demand[j] > FLOW_TOL {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let dt = dist[sink];
        for v in 0..n {
            pot[v] += dist[v].min(dt);
        }
        // bottleneck along the path sink <- right <- left <- ... <- left
        let mut path = vec![sink];
        let mut v = sink;
        while prev[v] != usize::MAX {
            v = prev[v];
            path.push(v);
        }
        path.reverse();
        let first = path[0];
        let last_right = path[path.len() - 2] - na;
        let mut amount = supply[first].min(demand[last_right]);
        for e in path.windows(2) {
            if e[0] >= na && e[0] < sink && e[1] < na {
                amount = amount.min(flow[e[1]][e[0] - na]);
            }
        }
        for e in path.windows(2) {
            let (u, v) = (e[0], e[1]);
            if u < na && v >= na && v < sink {
                flow[u][v - na] += amount;
            } else if u >= na && u < sink && v < na {
                flow[v][u - na] -= amount;
            }
        }
        supply[first] -= amount;
        demand[last_right] -= amount;
    }
    Ok(flow.iter().zip(&cost).map(|(f, c)| f.iter().zip(c).map(|(x, y)| x.max(0.0) * y).sum::<f64>()).sum())
}

/// Axis-aligned box that features are clipped to during sensitivity runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ClipBox {
    pub fn cube(d: usize, radius: f64) -> Self {
        Self { lo: vec![-radius; d], hi: vec![radius; d] }
    }

    pub fn diameter(&self) -> f64 {
        euclid(&self.lo, &self.hi)
    }

    pub fn clip(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.lo.iter().zip(&self.hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
    }
}

/// Domain diameter `m`: largest ground distance between two attribute values.
pub fn domain_diameter(scm: &TimeLaggedScm, clip: Option<&ClipBox>) -> Result<f64> {
    if let Transition::Table { states, .. } = &scm.transition {
        let mut m: f64 = 0.0;
        for a in states {
            for b in states {
                m = m.max(euclid(a, b));
            }
        }
        return Ok(m);
    }
    clip.map(|c| c.diameter())
        .ok_or_else(|| Error::Refused("continuous features need a clipping box for a finite diameter".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsEstimate {
    pub eps_hat: f64,
    pub ratios: Vec<f64>,
    /// Pairs skipped because `theta == theta'`.
    pub skipped: usize,
}

/// Which distribution is compared across parameter pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpsTarget {
    pub mode: Mode,
    pub hard_value: u8,
}

/// Transport distance between the distributions induced by two models.
fn induced_w1(
    scm: &TimeLaggedScm,
    target: EpsTarget,
    a: &DecisionModel,
    b: &DecisionModel,
    n: usize,
    seed: u64,
    clip: Option<&ClipBox>,
    exact: bool,
) -> Result<f64> {
    let spec = |m: &DecisionModel| match target.mode {
        Mode::LongTerm => InterventionSpec::long_term(scm, target.hard_value, m.clone()),
        Mode::ShortTerm(t) => InterventionSpec::short_term(t, target.hard_value, m.clone()),
    };
    if let Transition::Table { states, .. } = &scm.transition {
        let (pa, pb) = if exact {
            (
                exact_post_intervention(scm, &spec(a), DEFAULT_ENUMERATION_CAP)?.probs,
                exact_post_intervention(scm, &spec(b), DEFAULT_ENUMERATION_CAP)?.probs,
            )
        } else {
            let freq = |m| -> Result<Vec<f64>> {
                let s = sample_post_intervention(scm, &spec(m), n, seed)?;
                Ok(cell_counts(states, &s).iter().map(|c| *c as f64 / n as f64).collect())
            };
            (freq(a)?, freq(b)?)
        };
        return if scm.feature_dim == 1 {
            let xs: Vec<f64> = states.iter().map(|s| s[0]).collect();
            Ok(w1_1d(&xs, &pa, &xs, &pb))
        } else {
            transport_w1(states, &pa, states, &pb)
        };
    }
    let clip = clip.ok_or_else(|| Error::Refused("continuous features need a clipping box for W1".into()))?;
    let draw = |m| -> Result<Vec<Vec<f64>>> {
        Ok(sample_post_intervention(scm, &spec(m), n, seed)?.points.iter().map(|x| clip.clip(x)).collect())
    };
    let (xa, xb) = (draw(a)?, draw(b)?);
    if scm.feature_dim == 1 {
        let fa: Vec<f64> = xa.iter().map(|x| x[0]).collect();
        let fb: Vec<f64> = xb.iter().map(|x| x[0]).collect();
        return Ok(w1_samples_1d(&fa, &fb));
    }
    let k = n.min(TRANSPORT_SUPPORT);
    let w = vec![1.0 / k as f64; k];
    transport_w1(&xa[..k], &w, &xb[..k], &w)
}

/// Support size used for multi-dimensional transport on samples.
pub const TRANSPORT_SUPPORT: usize = 200;

/// `max W1(P(theta), P(theta')) / |theta - theta'|` over pairs. Table models
/// use exact enumeration when `exact` is set and sampled cell frequencies
/// otherwise; continuous models need a clipping box.
pub fn estimate_eps_sensitivity(
    scm: &TimeLaggedScm,
    pairs: &[(DecisionModel, DecisionModel)],
    target: EpsTarget,
    n: usize,
    seed: u64,
    clip: Option<&ClipBox>,
    exact: bool,
) -> Result<EpsEstimate> {
    scm.ensure_valid()?;
    if !scm.is_discrete() && clip.is_none() {
        return Err(Error::Refused("continuous features need a clipping box for W1".into()));
    }
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for (a, b) in pairs {
        let d = euclid(&a.weights, &b.weights);
        if d == 0.0 {
            skipped += 1;
            continue;
        }
        ratios.push(induced_w1(scm, target, a, b, n, seed, clip, exact)? / d);
    }
    let eps_hat = ratios.iter().copied().fold(0.0, f64::max);
    Ok(EpsEstimate { eps_hat, ratios, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CEstimate {
    pub c_hat: f64,
    /// Probes whose transition mass was zero.
    pub skipped: usize,
}

/// Transition density `P(x' | x, y)` for `y = -1, +1`. Table models are
/// evaluated exactly; the feedback rule through a Gaussian kernel.
fn transition_density(scm: &TimeLaggedScm, model: &DecisionModel, x: &[f64], s: u8, x_next: &[f64], bandwidth: f64) -> [f64; 2] {
    match &scm.transition {
        Transition::Table { states, next } => {
            let i = crate::scm::state_index(states, x).expect("probe state in table");
            let k = crate::scm::state_index(states, x_next).expect("successor in table");
            [next[i][0][k], next[i][1][k]]
        }
        Transition::Feedback { eps, b0, b1 } => {
            let b = if s == crate::scm::S_PLUS { *b1 } else { *b0 };
            let w = model.feature_weights();
            let kernel = |c: Vec<f64>| {
                let d2: f64 = c.iter().zip(x_next).map(|(a, z)| (a - z) * (a - z)).sum();
                let d = x.len() as f64;
                (-0.5 * d2 / (bandwidth * bandwidth)).exp() / (2.0 * std::f64::consts::PI * bandwidth * bandwidth).powf(d / 2.0)
            };
            let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(w).map(|(xi, wi)| xi + sign * eps * wi + b).collect() };
            let repay = sigmoid(scm.truth_model.score_unchecked(x, s));
            let approved = repay * kernel(shifted(1.0)) + (1.0 - repay) * kernel(shifted(-1.0));
            [kernel(shifted(0.0)), approved]
        }
    }
}

/// `max |sum_y grad P_theta(y | x, s) P(x' | x, y)| / sum_y P(x' | x, y)`
/// over models, probe states and successors. Decisions are scored at `s`.
/// Table models probe every state pair when `probes` is empty; continuous
/// models probe each listed `x` against its kernel centres.
pub fn estimate_c(scm: &TimeLaggedScm, models: &[DecisionModel], probes: &[Vec<f64>], s: u8, bandwidth: f64) -> Result<CEstimate> {
    scm.ensure_valid()?;
    if models.is_empty() {
        return Err(Error::Empty("model grid"));
    }
    let mut c_hat: f64 = 0.0;
    let mut skipped = 0;
    for model in models {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = match &scm.transition {
            Transition::Table { states, .. } => {
                let xs = if probes.is_empty() { states.clone() } else { probes.to_vec() };
                xs.iter().flat_map(|x| states.iter().map(move |y| (x.clone(), y.clone()))).collect()
            }
            Transition::Feedback { eps, b0, b1 } => {
                if !(bandwidth > 0.0) {
                    return Err(Error::Config("kernel bandwidth must be positive".into()));
                }
                let b = if s == crate::scm::S_PLUS { *b1 } else { *b0 };
                let w = model.feature_weights();
                probes
                    .iter()
                    .flat_map(|x| {
                        [-1.0, 0.0, 1.0].into_iter().map(move |sign| {
                            (x.clone(), x.iter().zip(w).map(|(xi, wi)| xi + sign * eps * wi + b).collect())
                        })
                    })
                    .collect()
            }
        };
        for (x, xn) in pairs {
            let [p_neg, p_pos] = transition_density(scm, model, &x, s, &xn, bandwidth);
            let denom = p_neg + p_pos;
            if denom <= 0.0 {
                skipped += 1;
                continue;
            }
            let h = model.score_unchecked(&x, s);
            let ds = sigmoid(h) * (1.0 - sigmoid(h));
            let feat = (x.iter().map(|v| v * v).sum::<f64>() + (s as f64).powi(2) + 1.0).sqrt();
            c_hat = c_hat.max(ds * feat * (p_pos - p_neg).abs() / denom);
        }
    }
    Ok(CEstimate { c_hat, skipped })
}

/// `(gamma_hat, beta_hat)` from Bregman and gradient-difference ratios over
/// ordered pairs lying on the same smooth piece of the objective.
pub fn estimate_curvature<O: Objective + ?Sized>(obj: &O, thetas: &[Vec<f64>]) -> Result<(f64, f64)> {
    if thetas.len() < 2 {
        return Err(Error::Config("curvature needs at least two parameter samples".into()));
    }
    let evals: Vec<(f64, Vec<f64>, Vec<bool>)> = thetas
        .iter()
        .map(|t| {
            let (v, g) = obj.value_and_grad(t)?;
            Ok((v, g, obj.kink_pattern(t)?))
        })
        .collect::<Result<_>>()?;
    let mut gamma = f64::INFINITY;
    let mut beta: f64 = 0.0;
    let mut used = 0;
    for i in 0..thetas.len() {
        for j in 0..thetas.len() {
            if i == j || evals[i].2 != evals[j].2 {
                continue;
            }
            let d: Vec<f64> = thetas[j].iter().zip(&thetas[i]).map(|(a, b)| a - b).collect();
            let d2: f64 = d.iter().map(|v| v * v).sum();
            if d2 == 0.0 {
                continue;
            }
            let lin: f64 = evals[i].1.iter().zip(&d).map(|(g, v)| g * v).sum();
            gamma = gamma.min(2.0 * (evals[j].0 - evals[i].0 - lin) / d2);
            let gd: f64 = evals[j].1.iter().zip(&evals[i].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            beta = beta.max(gd / d2.sqrt());
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Refused("every parameter pair straddles a hinge kink".into()));
    }
    Ok((gamma.max(0.0), beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub gamma_hat: f64,
    pub beta_hat: f64,
    pub c_hat: f64,
    pub eps_hat: f64,
    pub m: f64,
    pub horizon: usize,
    pub bound_2mct: f64,
    pub predicate: PredicateResult,
}

/// The stability inequality in its printed form `2mc(t*-1) < beta/gamma`
/// and in the reciprocal form `eps < gamma/beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateResult {
    pub printed_holds: bool,
    /// `beta/gamma - 2mc(t*-1)`.
    pub printed_margin: f64,
    pub reciprocal_holds: bool,
    /// `gamma/beta - eps_hat`.
    pub reciprocal_margin: f64,
}

impl SensitivityReport {
    pub fn new(gamma_hat: f64, beta_hat: f64, c_hat: f64, eps_hat: f64, m: f64, horizon: usize) -> Self {
        let bound_2mct = 2.0 * m * c_hat * horizon.saturating_sub(1) as f64;
        let mut r = Self { gamma_hat, beta_hat, c_hat, eps_hat, m, horizon, bound_2mct, predicate: PredicateResult {
            printed_holds: false,
            printed_margin: 0.0,
            reciprocal_holds: false,
            reciprocal_margin: 0.0,
        } };
        r.predicate = convergence_predicate(&r);
        r
    }
}

pub fn convergence_predicate(r: &SensitivityReport) -> PredicateResult {
    let ratio = if r.gamma_hat > 0.0 { r.beta_hat / r.gamma_hat } else { f64::INFINITY };
    let inverse = if r.beta_hat > 0.0 { r.gamma_hat / r.beta_hat } else { f64::INFINITY };
    let bound = 2.0 * r.m * r.c_hat * r.horizon.saturating_sub(1) as f64;
    PredicateResult {
        printed_holds: bound < ratio,
        printed_margin: ratio - bound,
        reciprocal_holds: r.eps_hat < inverse,
        reciprocal_margin: inverse - r.eps_hat,
    }
}
