//! The generate / train / evaluate / sweep / sensitivity stages. Every file
//! they write carries the config hash and the root seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::fit_baseline;
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::datagen::{generate_semi_synthetic, generate_synthetic};
use crate::error::{Error, Result};
use crate::evaluate::{deploy_and_measure, emit_replicate_table, emit_table, EvalReport};
use crate::intervene::Mode;
use crate::io::{sha256_hex, write_atomic};
use crate::model::DecisionModel;
use crate::objective::PerformativeObjective;
use crate::panel::{JsonlHeader, PanelDataset};
use crate::rng;
use crate::scm::{S_MINUS, S_PLUS};
use crate::sensitivity::{
    domain_diameter, estimate_c, estimate_curvature, estimate_eps_sensitivity, ClipBox, EpsTarget, SensitivityReport,
};
use crate::trainer::{log_linear_fit, rrm_fit, sample_batch, utility_rows, RrmTrace};

pub const PANEL_FILE: &str = "panel.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const REPLICATES_FILE: &str = "replicates.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const RRM_NAME: &str = "RRM";

fn csv_preamble(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn header(cfg: &RunConfig, kind: &str) -> JsonlHeader {
    JsonlHeader { header: kind.into(), schema_version: SCHEMA_VERSION, config_hash: cfg.hash(), seed: cfg.seed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub individuals: usize,
    pub steps: usize,
    pub feature_dim: usize,
    pub group_sizes: [usize; 2],
    pub label_base_rates: Vec<f64>,
    pub panel_sha256: String,
}

/// Builds the panel described by the config.
pub fn build_dataset(cfg: &RunConfig, eps: f64) -> Result<PanelDataset> {
    let scm = cfg.scm(eps)?;
    let gen = cfg.gen_config_with_eps(eps);
    match cfg.seed_population()? {
        Some(pop) => generate_semi_synthetic(&pop, &scm, &gen),
        None => generate_synthetic(&scm, &gen),
    }
}

pub fn cmd_generate(cfg: &RunConfig, dry_run: bool) -> Result<Option<Manifest>> {
    cfg.validate()?;
    if dry_run {
        return Ok(None);
    }
    let ds = build_dataset(cfg, cfg.datagen.eps_update)?;
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf, &header(cfg, "panel"))?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        individuals: ds.len(),
        steps: ds.steps(),
        feature_dim: ds.feature_dim(),
        group_sizes: ds.group_sizes(),
        label_base_rates: ds.label_base_rates(),
        panel_sha256: sha256_hex(&buf),
    };
    write_atomic(&cfg.output_dir.join(PANEL_FILE), &buf)?;
    write_atomic(&cfg.output_dir.join(MANIFEST_FILE), &json_bytes(&manifest)?)?;
    Ok(Some(manifest))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<PanelDataset> {
    let (_, ds) = PanelDataset::read_jsonl(&cfg.output_dir.join(PANEL_FILE))?;
    if ds.feature_dim() != cfg.scm.feature_dim {
        return Err(Error::Dimension { expected: cfg.scm.feature_dim, got: ds.feature_dim() });
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub algorithm: String,
    pub weights: Vec<f64>,
    pub feature_dim: usize,
    pub horizon: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl ModelFile {
    pub fn model(&self) -> Result<DecisionModel> {
        DecisionModel::new(self.weights.clone())
    }
}

pub fn model_path(cfg: &RunConfig, algorithm: &str) -> PathBuf {
    cfg.output_dir.join("models").join(format!("{algorithm}.json"))
}

fn save_model(cfg: &RunConfig, algorithm: &str, model: &DecisionModel) -> Result<()> {
    let f = ModelFile {
        schema_version: SCHEMA_VERSION,
        algorithm: algorithm.into(),
        weights: model.weights.clone(),
        feature_dim: model.feature_dim(),
        horizon: cfg.scm.horizon,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    write_atomic(&model_path(cfg, algorithm), &json_bytes(&f)?)
}

fn trace_bytes(cfg: &RunConfig, trace: &RrmTrace) -> Result<Vec<u8>> {
    let mut out = serde_json::to_string(&header(cfg, "rrm_trace"))?;
    out.push('\n');
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    let summary = serde_json::json!({
        "converged": trace.converged,
        "converged_at": trace.converged_at,
        "iterations": trace.records.len(),
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    Ok(out.into_bytes())
}

fn convergence_csv(cfg: &RunConfig, trace: &RrmTrace) -> String {
    let mut out = csv_preamble(cfg);
    out.push_str("iteration,delta,utility,longterm,shortterm,total,inner_steps\n");
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},{:e},{},{},{},{},{}",
            r.iteration, r.delta, r.utility, r.longterm, r.shortterm, r.total, r.inner_steps
        );
    }
    out
}

fn write_trace(cfg: &RunConfig, trace: &RrmTrace) -> Result<()> {
    write_atomic(&cfg.output_dir.join(TRACE_FILE), &trace_bytes(cfg, trace)?)?;
    write_atomic(&cfg.output_dir.join(CONVERGENCE_FILE), convergence_csv(cfg, trace).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub models: Vec<(String, DecisionModel)>,
    pub trace: Option<RrmTrace>,
}

/// Trains the baselines and, unless disabled, the repeated-risk model.
pub fn cmd_train(cfg: &RunConfig, baselines_only: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let mut models = Vec::new();
    let mut trace = None;
    if cfg.training.run_rrm && !baselines_only {
        let scm = cfg.scm(cfg.datagen.eps_update)?;
        match rrm_fit(&scm, &ds, &cfg.training.weights, &cfg.rrm_config()) {
            Ok((model, tr)) => {
                write_trace(cfg, &tr)?;
                save_model(cfg, RRM_NAME, &model)?;
                models.push((RRM_NAME.to_string(), model));
                trace = Some(tr);
            }
            Err(Error::Diverged { iteration, trace }) => {
                write_trace(cfg, &trace)?;
                return Err(Error::Diverged { iteration, trace });
            }
            Err(e) => return Err(e),
        }
    }
    for spec in &cfg.training.baselines {
        let m = fit_baseline(&ds, spec)?;
        save_model(cfg, spec.kind.name(), &m)?;
        models.push((spec.kind.name().to_string(), m));
    }
    Ok(TrainOutcome { models, trace })
}

fn load_models(cfg: &RunConfig) -> Result<Vec<(String, DecisionModel)>> {
    let mut names: Vec<String> = Vec::new();
    if cfg.training.run_rrm {
        names.push(RRM_NAME.into());
    }
    names.extend(cfg.training.baselines.iter().map(|b| b.kind.name().to_string()));
    let mut out = Vec::new();
    for name in names {
        let path = model_path(cfg, &name);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let f: ModelFile = serde_json::from_str(&text)?;
        if f.horizon != cfg.scm.horizon {
            return Err(Error::Horizon { requested: f.horizon, horizon: cfg.scm.horizon });
        }
        out.push((name, f.model()?));
    }
    if out.is_empty() {
        return Err(Error::Empty("trained models in the output directory"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

/// Measures every stored model on fresh populations, one per replicate.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<Vec<EvalReport>>> {
    cfg.validate()?;
    let models = load_models(cfg)?;
    let scm = cfg.scm(cfg.datagen.eps_update)?;
    let n = cfg.eval_n();
    let mut groups = Vec::new();
    for (name, model) in &models {
        let reps = (0..cfg.eval.replicates)
            .map(|k| deploy_and_measure(&scm, model, name, n, cfg.eval_seed(k)))
            .collect::<Result<Vec<_>>>()?;
        groups.push(reps);
    }
    let table = if cfg.eval.replicates > 1 {
        emit_replicate_table(&groups)?
    } else {
        emit_table(&groups.iter().map(|g| g[0].clone()).collect::<Vec<_>>())?
    };
    write_atomic(&cfg.output_dir.join(TABLE_FILE), format!("{}{table}", csv_preamble(cfg)).as_bytes())?;
    let file = ReplicateFile {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        reports: groups.iter().flatten().cloned().collect(),
    };
    write_atomic(&cfg.output_dir.join(REPLICATES_FILE), &json_bytes(&file)?)?;
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub eps: f64,
    pub deltas: Vec<f64>,
    pub converged: bool,
    /// `(slope, r_squared)` of `ln(delta)` against the iteration.
    pub log_fit: Option<(f64, f64)>,
    pub error: Option<String>,
}

/// Removes repeated values, keeping first occurrences; returns the
/// duplicates that were dropped.
pub fn dedupe_eps(list: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut dropped = Vec::new();
    for &e in list {
        if kept.iter().any(|k| k.to_bits() == e.to_bits()) {
            dropped.push(e);
        } else {
            kept.push(e);
        }
    }
    (kept, dropped)
}

/// Regenerates and retrains at each update sensitivity; failures are
/// recorded per value and do not stop the sweep.
pub fn cmd_sweep(cfg: &RunConfig, eps_list: &[f64]) -> Result<Vec<SweepEntry>> {
    cfg.validate()?;
    if eps_list.is_empty() {
        return Err(Error::Empty("eps list"));
    }
    let (eps_list, dropped) = dedupe_eps(eps_list);
    for d in dropped {
        eprintln!("warning: duplicate eps value {d} ignored");
    }
    let run = |eps: f64| -> Result<RrmTrace> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("eps_update must be non-negative, got {eps}")));
        }
        let ds = build_dataset(cfg, eps)?;
        let scm = cfg.scm(eps)?;
        match rrm_fit(&scm, &ds, &cfg.training.weights, &cfg.rrm_config()) {
            Ok((_, tr)) => Ok(tr),
            Err(Error::Diverged { trace, .. }) => Ok(*trace),
            Err(e) => Err(e),
        }
    };
    let entries: Vec<SweepEntry> = eps_list
        .iter()
        .map(|&eps| match run(eps) {
            Ok(tr) => SweepEntry {
                eps,
                log_fit: log_linear_fit(&tr.deltas()),
                deltas: tr.deltas(),
                converged: tr.converged,
                error: None,
            },
            Err(e) => SweepEntry { eps, deltas: vec![], converged: false, log_fit: None, error: Some(e.to_string()) },
        })
        .collect();
    let mut long = csv_preamble(cfg);
    long.push_str("eps,iteration,delta,status\n");
    let mut summary = csv_preamble(cfg);
    summary.push_str("eps,converged,iterations,final_delta,log_slope,log_r2,status\n");
    for e in &entries {
        let status = match &e.error {
            Some(msg) => format!("failed: {}", msg.replace([',', '\n'], " ")),
            None if e.converged => "converged".into(),
            None => "not_converged".into(),
        };
        for (i, d) in e.deltas.iter().enumerate() {
            let _ = writeln!(long, "{},{},{:e},{status}", e.eps, i + 1, d);
        }
        if e.deltas.is_empty() {
            let _ = writeln!(long, "{},,,{status}", e.eps);
        }
        let (slope, r2) = e.log_fit.map_or((String::new(), String::new()), |(s, r)| (format!("{s}"), format!("{r}")));
        let last = e.deltas.last().map_or(String::new(), |d| format!("{d:e}"));
        let _ = writeln!(summary, "{},{},{},{last},{slope},{r2},{status}", e.eps, e.converged, e.deltas.len());
    }
    write_atomic(&cfg.output_dir.join(SWEEP_FILE), long.as_bytes())?;
    write_atomic(&cfg.output_dir.join(SWEEP_SUMMARY_FILE), summary.as_bytes())?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub eps_update: f64,
    pub report: SensitivityReport,
    pub skipped_pairs: usize,
    pub skipped_probes: usize,
}

/// Estimates the stability constants around the stored RRM model, or around
/// the observational initial model when none is stored.
pub fn cmd_sensitivity(cfg: &RunConfig) -> Result<SensitivityFile> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let scm = cfg.scm(cfg.datagen.eps_update)?;
    let sc = &cfg.sensitivity;
    let model = match load_models(cfg).ok().and_then(|m| m.into_iter().find(|(n, _)| n == RRM_NAME)) {
        Some((_, m)) => m,
        None => crate::trainer::init_model(&ds, &cfg.training.weights, &cfg.training.rrm.inner)?,
    };
    let dim = model.weights.len();
    let seed = rng::derive(cfg.seed, "sensitivity");
    let mut r = rng::stream(seed, 0);
    let mut perturbed = |scale: f64| -> DecisionModel {
        use rand::Rng;
        let dir: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        DecisionModel { weights: model.weights.iter().zip(&dir).map(|(w, d)| w + scale * d / norm).collect() }
    };
    let pairs: Vec<(DecisionModel, DecisionModel)> = (0..sc.pairs).map(|_| (model.clone(), perturbed(sc.perturbation))).collect();
    let clip = ClipBox::cube(scm.feature_dim, sc.clip_radius);
    let target = EpsTarget { mode: Mode::LongTerm, hard_value: S_PLUS };
    let eps = estimate_eps_sensitivity(&scm, &pairs, target, sc.n, seed, Some(&clip), false)?;
    let grid: Vec<DecisionModel> = std::iter::once(model.clone()).chain(pairs.iter().map(|p| p.1.clone())).collect();
    let probes: Vec<Vec<f64>> = ds.x.iter().take(200).map(|xi| clip.clip(&xi[0])).collect();
    let c = estimate_c(&scm, &grid, &probes, S_MINUS, sc.bandwidth)?;
    let m = domain_diameter(&scm, Some(&clip))?;
    let mut rrm = cfg.rrm_config();
    rrm.mc_samples = sc.n;
    let batch = sample_batch(&scm, &model, utility_rows(&ds), &rrm, 0)?;
    let obj = PerformativeObjective::new(&batch, &cfg.training.weights, scm.feature_dim);
    let thetas: Vec<Vec<f64>> = grid.iter().map(|g| g.weights.clone()).collect();
    let (gamma, beta) = estimate_curvature(&obj, &thetas)?;
    let report = SensitivityReport::new(gamma, beta, c.c_hat, eps.eps_hat, m, scm.horizon);
    let file = SensitivityFile {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        eps_update: cfg.datagen.eps_update,
        report,
        skipped_pairs: eps.skipped,
        skipped_probes: c.skipped,
    };
    write_atomic(&cfg.output_dir.join(SENSITIVITY_FILE), &json_bytes(&file)?)?;
    Ok(file)
}

/// SHA-256 of each named output file that exists.
pub fn output_hashes(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.insert(name.to_string(), sha256_hex(&bytes));
        }
    }
    Ok(out)
}
