//! Synthetic and CSV-seeded lending panels.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, DecisionModel, Label};
use crate::panel::PanelDataset;
use crate::rng;
use crate::scm::{identity, InitDistribution, InitNoise, Partition, PreparedInit, TimeLaggedScm, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_individuals: usize,
    pub steps: usize,
    pub eps_update: f64,
    pub b0: f64,
    pub b1: f64,
    /// `[s-, s+]`; defaults to `-1` and `+1` in every coordinate.
    #[serde(default)]
    pub group_means: Option<[Vec<f64>; 2]>,
    /// `[s-, s+]`; defaults to identity.
    #[serde(default)]
    pub group_covs: Option<[Vec<Vec<f64>>; 2]>,
    pub seed: u64,
}

impl GenConfig {
    pub fn reference(seed: u64) -> Self {
        Self {
            n_individuals: 5000,
            steps: 5,
            eps_update: 0.5,
            b0: 0.2,
            b1: 1.0,
            group_means: None,
            group_covs: None,
            seed,
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.n_individuals == 0 || self.steps == 0 {
            return Err(Error::Config("n_individuals and steps must be positive".into()));
        }
        if !(self.eps_update >= 0.0 && self.eps_update.is_finite()) {
            return Err(Error::Config(format!("eps_update must be non-negative, got {}", self.eps_update)));
        }
        let (means, covs) = self.gaussians(feature_dim);
        for g in 0..2 {
            if means[g].len() != feature_dim {
                return Err(Error::Dimension { expected: feature_dim, got: means[g].len() });
            }
            crate::scm::cholesky(&covs[g], feature_dim)
                .map_err(|e| Error::Config(format!("group {g} covariance: {e}")))?;
        }
        Ok(())
    }

    pub fn gaussians(&self, d: usize) -> ([Vec<f64>; 2], [Vec<Vec<f64>>; 2]) {
        let means = self.group_means.clone().unwrap_or_else(|| [vec![-1.0; d], vec![1.0; d]]);
        let covs = self.group_covs.clone().unwrap_or_else(|| [identity(d), identity(d)]);
        (means, covs)
    }

    pub fn transition(&self) -> Transition {
        Transition::Feedback { eps: self.eps_update, b0: self.b0, b1: self.b1 }
    }

    /// Causal model implied by this generator with Gaussian group inits.
    pub fn scm(&self, truth: DecisionModel, horizon: usize) -> TimeLaggedScm {
        let d = truth.feature_dim();
        let (means, covs) = self.gaussians(d);
        TimeLaggedScm {
            feature_dim: d,
            horizon,
            init: InitDistribution::Gaussian { means, covs },
            transition: self.transition(),
            truth_model: truth,
            partition: Partition::all_relevant(d),
        }
    }
}

/// Ground-truth model drawn from a seeded standard normal.
pub fn draw_truth_model(feature_dim: usize, seed: u64) -> DecisionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(rng::derive(seed, "truth_model"));
    DecisionModel {
        weights: (0..feature_dim + 2).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
    }
}

/// Seed population `(S, X^1)` replacing the Gaussian init.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPopulation {
    pub s: Vec<u8>,
    pub x: Vec<Vec<f64>>,
}

impl InitialPopulation {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.first().map_or(0, |r| r.len())
    }

    /// Empirical `P(X^1 | S)` of this population.
    pub fn init_distribution(&self) -> InitDistribution {
        let mut groups: [Vec<Vec<f64>>; 2] = [vec![], vec![]];
        for (s, x) in self.s.iter().zip(&self.x) {
            groups[*s as usize].push(x.clone());
        }
        InitDistribution::Empirical { groups }
    }
}

fn check_consistency(scm: &TimeLaggedScm, cfg: &GenConfig) -> Result<()> {
    scm.ensure_valid()?;
    cfg.validate(scm.feature_dim)?;
    if let Transition::Feedback { .. } = scm.transition {
        if scm.transition != cfg.transition() {
            return Err(Error::Config("generator update parameters differ from the causal model's transition".into()));
        }
    }
    Ok(())
}

struct Trajectory {
    x: Vec<Vec<f64>>,
    y: Vec<Label>,
    decisions: Vec<Label>,
}

/// Rolls one individual forward with the ground-truth model deployed.
fn roll_truth(scm: &TimeLaggedScm, s: u8, x1: Vec<f64>, steps: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let truth = &scm.truth_model;
    let mut out = Trajectory { x: Vec::with_capacity(steps), y: vec![], decisions: vec![] };
    let mut x = x1;
    for t in 0..steps {
        let p = sigmoid(truth.score_unchecked(&x, s));
        let decision: Label = if rng.random::<f64>() < p { 1 } else { -1 };
        let outcome: Label = if rng.random::<f64>() < p { 1 } else { -1 };
        let u: f64 = rng.random();
        let next = if t + 1 < steps {
            Some(scm.transition.advance(&x, s, decision, outcome, truth.feature_weights(), u))
        } else {
            None
        };
        out.decisions.push(decision);
        out.y.push(outcome);
        out.x.push(x);
        match next {
            Some(n) => x = n,
            None => break,
        }
    }
    out
}

fn assemble(s: Vec<u8>, trajs: Vec<Trajectory>) -> PanelDataset {
    let mut ds = PanelDataset { s, x: vec![], y: vec![], decisions: vec![] };
    for tr in trajs {
        ds.x.push(tr.x);
        ds.y.push(tr.y);
        ds.decisions.push(tr.decisions);
    }
    ds
}

/// Panel from the Gaussian group inits. Each individual owns an RNG
/// substream, so the output does not depend on the thread count.
pub fn generate_synthetic(scm: &TimeLaggedScm, cfg: &GenConfig) -> Result<PanelDataset> {
    check_consistency(scm, cfg)?;
    let prepared = PreparedInit::new(scm)?;
    let seed = rng::derive(cfg.seed, "datagen");
    let rows: Vec<(u8, Trajectory)> = (0..cfg.n_individuals)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let s = u8::from(r.random::<f64>() < 0.5);
            let noise: InitNoise = scm.init_noise(&mut r);
            let x1 = prepared.draw(s, &noise);
            (s, roll_truth(scm, s, x1, cfg.steps, &mut r))
        })
        .collect();
    let (s, trajs) = rows.into_iter().unzip();
    Ok(assemble(s, trajs))
}

/// Panel whose `(S, X^1)` come from `seedpop`; everything after step 1 is
/// generated exactly as in [`generate_synthetic`].
pub fn generate_semi_synthetic(seedpop: &InitialPopulation, scm: &TimeLaggedScm, cfg: &GenConfig) -> Result<PanelDataset> {
    if seedpop.is_empty() {
        return Err(Error::Empty("seed population"));
    }
    if seedpop.feature_dim() != scm.feature_dim || seedpop.x.iter().any(|r| r.len() != scm.feature_dim) {
        return Err(Error::Dimension { expected: scm.feature_dim, got: seedpop.feature_dim() });
    }
    scm.ensure_valid()?;
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    if let Transition::Feedback { .. } = scm.transition {
        if scm.transition != cfg.transition() {
            return Err(Error::Config("generator update parameters differ from the causal model's transition".into()));
        }
    }
    let seed = rng::derive(cfg.seed, "datagen");
    let trajs: Vec<Trajectory> = (0..seedpop.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            roll_truth(scm, seedpop.s[i], seedpop.x[i].clone(), cfg.steps, &mut r)
        })
        .collect();
    Ok(assemble(seedpop.s.clone(), trajs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    Identity,
    /// Per-column zero mean and unit population standard deviation.
    ZScore,
    /// Per-column affine map onto `[0, 1]`.
    MinMax,
}

/// Where and how to read a seed population from CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSeedSpec {
    pub path: PathBuf,
    pub feature_columns: Vec<String>,
    pub protected_column: String,
    /// Cell value (after trimming) mapped to s+; every other value maps to s-.
    pub protected_positive: String,
    pub n_rows: usize,
    #[serde(default)]
    pub scale: Scaling,
    /// Shuffle rows with this seed before taking the first `n_rows`.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    /// Take `n_rows / 2` rows from each group.
    #[serde(default)]
    pub balanced: bool,
}

pub fn ingest_csv_seed(spec: &CsvSeedSpec) -> Result<InitialPopulation> {
    let path = spec.path.as_path();
    let csv_err = |message: String| Error::Csv { path: path.to_path_buf(), message };
    if spec.feature_columns.is_empty() {
        return Err(csv_err("no feature columns requested".into()));
    }
    if spec.n_rows == 0 {
        return Err(csv_err("n_rows must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| csv_err(format!("missing column `{name}`")))
    };
    let feature_idx: Vec<usize> = spec.feature_columns.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let s_idx = column(&spec.protected_column)?;

    let mut rows: Vec<(usize, &str, u8)> = Vec::new();
    let mut records = Vec::new();
    for rec in reader.records() {
        records.push(rec.map_err(|e| csv_err(e.to_string()))?);
    }
    for (k, rec) in records.iter().enumerate() {
        let s_cell = rec.get(s_idx).unwrap_or("").trim();
        rows.push((k, s_cell, u8::from(s_cell == spec.protected_positive.trim())));
    }
    if let Some(seed) = spec.shuffle_seed {
        let mut r = ChaCha8Rng::seed_from_u64(rng::derive(seed, "csv_shuffle"));
        rows.shuffle(&mut r);
    }

    let chosen: Vec<(usize, u8)> = if spec.balanced {
        let per_group = spec.n_rows / 2;
        let mut taken = [0usize, 0usize];
        let mut out = Vec::with_capacity(spec.n_rows);
        for &(k, _, s) in &rows {
            let target = if s == 1 { spec.n_rows - per_group } else { per_group };
            if taken[s as usize] < target {
                taken[s as usize] += 1;
                out.push((k, s));
            }
        }
        if out.len() < spec.n_rows {
            return Err(csv_err(format!(
                "balanced extraction needs {} rows per group but found {} (s-) and {} (s+)",
                per_group, taken[0], taken[1]
            )));
        }
        out
    } else {
        if rows.len() < spec.n_rows {
            return Err(csv_err(format!(
                "requested {} rows but the file has only {} (short by {})",
                spec.n_rows,
                rows.len(),
                spec.n_rows - rows.len()
            )));
        }
        rows.iter().take(spec.n_rows).map(|&(k, _, s)| (k, s)).collect()
    };

    let mut pop = InitialPopulation { s: vec![], x: vec![] };
    for (k, s) in chosen {
        let rec = &records[k];
        let mut x = Vec::with_capacity(feature_idx.len());
        for (name, &j) in spec.feature_columns.iter().zip(&feature_idx) {
            let cell = rec.get(j).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::CsvCell {
                path: path.to_path_buf(),
                // header is line 1
                row: k + 2,
                column: name.clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvCell {
                    path: path.to_path_buf(),
                    row: k + 2,
                    column: name.clone(),
                    message: "value is not finite".into(),
                });
            }
            x.push(v);
        }
        pop.s.push(s);
        pop.x.push(x);
    }
    scale_columns(&mut pop.x, spec.scale);
    Ok(pop)
}

fn scale_columns(x: &mut [Vec<f64>], scale: Scaling) {
    if x.is_empty() || scale == Scaling::Identity {
        return;
    }
    let d = x[0].len();
    let n = x.len() as f64;
    for j in 0..d {
        match scale {
            Scaling::ZScore => {
                let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                for r in x.iter_mut() {
                    r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
                }
            }
            Scaling::MinMax => {
                let lo = x.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = x.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                for r in x.iter_mut() {
                    r[j] = if hi > lo { (r[j] - lo) / (hi - lo) } else { 0.0 };
                }
            }
            Scaling::Identity => {}
        }
    }
}

/// Writes a deterministic credit-style CSV with columns
/// `ID,SEX,PAY_AMT1,PAY_AMT2,default`, for when the real credit file is not
/// at hand. `SEX` is `1` or `2`; payment amounts are log-normal.
pub fn write_credit_standin(path: &Path, rows: usize, seed: u64) -> Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(rng::derive(seed, "credit_standin"));
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv { path: path.into(), message: e.to_string() })?;
    let to_err = |e: csv::Error| Error::Csv { path: path.into(), message: e.to_string() };
    w.write_record(["ID", "SEX", "PAY_AMT1", "PAY_AMT2", "default"]).map_err(to_err)?;
    for i in 0..rows {
        let sex = if r.random::<f64>() < 0.5 { 1 } else { 2 };
        let shift = if sex == 1 { 0.1 } else { 0.0 };
        let z1: f64 = r.sample(rand_distr::StandardNormal);
        let z2: f64 = r.sample(rand_distr::StandardNormal);
        let a1 = (7.8 + shift + 0.9 * z1).exp().round();
        let a2 = (7.7 + shift + 0.3 * z1 + 0.85 * z2).exp().round();
        let default = u8::from(r.random::<f64>() < 0.22);
        w.write_record([
            (i + 1).to_string(),
            sex.to_string(),
            format!("{a1}"),
            format!("{a2}"),
            default.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
