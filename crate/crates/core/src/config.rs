//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, BaselineSpec};
use crate::datagen::{draw_truth_model, ingest_csv_seed, CsvSeedSpec, GenConfig, InitialPopulation, Scaling};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::model::DecisionModel;
use crate::objective::LossWeights;
use crate::rng;
use crate::scm::{Partition, TimeLaggedScm};
use crate::trainer::{InnerOptimizer, RrmConfig, Sampling};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSection {
    pub feature_dim: usize,
    pub horizon: usize,
    /// Seed of the standard-normal draw of the ground-truth weights.
    #[serde(default)]
    pub truth_seed: u64,
    /// Explicit ground-truth weights `[w_x..., w_s, bias]`; overrides
    /// `truth_seed`.
    #[serde(default)]
    pub truth_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub partition: Option<Partition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub n_individuals: usize,
    pub steps: usize,
    pub eps_update: f64,
    pub b0: f64,
    pub b1: f64,
    #[serde(default)]
    pub group_means: Option<[Vec<f64>; 2]>,
    #[serde(default)]
    pub group_covs: Option<[Vec<Vec<f64>>; 2]>,
    /// Seed population read from CSV instead of the Gaussian inits.
    #[serde(default)]
    pub csv_seed: Option<CsvSeedSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrmSection {
    pub delta: f64,
    pub max_outer_iters: usize,
    #[serde(default)]
    pub inner: InnerOptimizer,
    pub mc_samples: usize,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for RrmSection {
    fn default() -> Self {
        let d = RrmConfig::default();
        Self { delta: d.delta, max_outer_iters: d.max_outer_iters, inner: d.inner, mc_samples: d.mc_samples, sampling: d.sampling }
    }
}

fn default_true() -> bool {
    true
}

fn default_baselines() -> Vec<BaselineSpec> {
    [BaselineKind::Lr, BaselineKind::Fmdp, BaselineKind::Fmeo].into_iter().map(BaselineSpec::new).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub rrm: RrmSection,
    #[serde(default = "default_true")]
    pub run_rrm: bool,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineSpec>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { weights: LossWeights::default(), rrm: RrmSection::default(), run_rrm: true, baselines: default_baselines() }
    }
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Population size; defaults to the dataset size.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n: None, replicates: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySection {
    /// Half-width of the feature clipping cube.
    pub clip_radius: f64,
    pub bandwidth: f64,
    pub n: usize,
    /// Number of perturbed parameter pairs.
    pub pairs: usize,
    /// Norm of each parameter perturbation.
    pub perturbation: f64,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self { clip_radius: 6.0, bandwidth: 0.5, n: 2000, pairs: 4, perturbation: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub eps_list: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { eps_list: vec![0.1, 0.5, 2.0, 5.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scm: ScmSection,
    pub datagen: DatagenSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sensitivity: SensitivitySection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Lending simulation with two features, five steps and 5000 people.
    pub fn reference_synthetic(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            output_dir: output_dir.into(),
            scm: ScmSection { feature_dim: 2, horizon: 5, truth_seed: 0, truth_weights: Some(vec![1.0, -0.5, 0.0, 0.0]), partition: None },
            datagen: DatagenSection {
                n_individuals: 5000,
                steps: 5,
                eps_update: 0.5,
                b0: 0.2,
                b1: 1.0,
                group_means: Some([vec![-0.25, -0.25], vec![0.25, 0.25]]),
                group_covs: None,
                csv_seed: None,
            },
            training: TrainingSection {
                weights: LossWeights { lambda_u: 0.35, lambda_l: 0.45, lambda_s: 0.2, ..LossWeights::default() },
                ..TrainingSection::default()
            },
            eval: EvalSection::default(),
            sensitivity: SensitivitySection::default(),
            sweep: SweepSection::default(),
        }
    }

    /// Four-step panel seeded by 3000 balanced rows of a credit CSV with
    /// columns `SEX`, `PAY_AMT1` and `PAY_AMT2`, z-scored.
    pub fn reference_semi_synthetic(seed: u64, csv: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::reference_synthetic(seed, output_dir);
        cfg.scm.horizon = 4;
        cfg.datagen.steps = 4;
        cfg.datagen.n_individuals = 3000;
        cfg.datagen.group_means = None;
        cfg.scm.truth_weights = Some(vec![2.0, -1.0, 0.0, 0.2]);
        cfg.training.weights = LossWeights { lambda_u: 0.42, lambda_l: 0.43, lambda_s: 0.15, ..cfg.training.weights.clone() };
        cfg.datagen.csv_seed = Some(CsvSeedSpec {
            path: csv.into(),
            feature_columns: vec!["PAY_AMT1".into(), "PAY_AMT2".into()],
            protected_column: "SEX".into(),
            protected_positive: "1".into(),
            n_rows: 3000,
            scale: Scaling::ZScore,
            shuffle_seed: Some(seed),
            balanced: true,
        });
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version)));
        }
        let d = self.scm.feature_dim;
        if d == 0 || self.scm.horizon == 0 {
            return Err(Error::Config("feature_dim and horizon must be positive".into()));
        }
        if self.datagen.steps != self.scm.horizon {
            return Err(Error::Config(format!(
                "datagen.steps ({}) must equal scm.horizon ({})",
                self.datagen.steps, self.scm.horizon
            )));
        }
        if let Some(w) = &self.scm.truth_weights {
            if w.len() != d + 2 {
                return Err(Error::Dimension { expected: d + 2, got: w.len() });
            }
        }
        if let Some(c) = &self.datagen.csv_seed {
            if c.feature_columns.len() != d {
                return Err(Error::Dimension { expected: d, got: c.feature_columns.len() });
            }
        }
        self.gen_config().validate(d)?;
        self.training.weights.validate()?;
        self.rrm_config().validate()?;
        for b in &self.training.baselines {
            b.validate()?;
        }
        if self.eval.replicates == 0 || self.eval.n == Some(0) {
            return Err(Error::Config("eval needs n >= 1 and replicates >= 1".into()));
        }
        let s = &self.sensitivity;
        if !(s.clip_radius > 0.0 && s.bandwidth > 0.0 && s.perturbation > 0.0) || s.n == 0 || s.pairs == 0 {
            return Err(Error::Config("sensitivity parameters must be positive".into()));
        }
        self.scm(self.datagen.eps_update)?.ensure_valid()
    }

    pub fn truth_model(&self) -> DecisionModel {
        match &self.scm.truth_weights {
            Some(w) => DecisionModel { weights: w.clone() },
            None => draw_truth_model(self.scm.feature_dim, self.scm.truth_seed),
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        self.gen_config_with_eps(self.datagen.eps_update)
    }

    pub fn gen_config_with_eps(&self, eps: f64) -> GenConfig {
        let g = &self.datagen;
        GenConfig {
            n_individuals: g.n_individuals,
            steps: g.steps,
            eps_update: eps,
            b0: g.b0,
            b1: g.b1,
            group_means: g.group_means.clone(),
            group_covs: g.group_covs.clone(),
            seed: rng::derive(self.seed, "datagen"),
        }
    }

    pub fn seed_population(&self) -> Result<Option<InitialPopulation>> {
        self.datagen.csv_seed.as_ref().map(ingest_csv_seed).transpose()
    }

    /// Causal model at the given update sensitivity.
    pub fn scm(&self, eps: f64) -> Result<TimeLaggedScm> {
        let gen = self.gen_config_with_eps(eps);
        let mut scm = gen.scm(self.truth_model(), self.scm.horizon);
        if let Some(pop) = self.seed_population()? {
            scm.init = pop.init_distribution();
        }
        if let Some(p) = &self.scm.partition {
            scm.partition = p.clone();
        }
        Ok(scm)
    }

    pub fn rrm_config(&self) -> RrmConfig {
        let r = &self.training.rrm;
        RrmConfig {
            delta: r.delta,
            max_outer_iters: r.max_outer_iters,
            inner: r.inner.clone(),
            mc_samples: r.mc_samples,
            seed: rng::derive(self.seed, "train"),
            sampling: r.sampling,
        }
    }

    pub fn eval_n(&self) -> usize {
        self.eval.n.unwrap_or(self.datagen.n_individuals)
    }

    pub fn eval_seed(&self, replicate: usize) -> u64 {
        rng::derive_index(rng::derive(self.seed, "eval"), replicate as u64)
    }
}
