//! Per-individual trajectories `(S, X^t, Y^t)` and their JSONL form.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    /// Protected attribute per individual, `1` = s+, `0` = s-.
    pub s: Vec<u8>,
    /// `x[i][t]` is the feature vector of individual `i` at step `t + 1`.
    pub x: Vec<Vec<Vec<f64>>>,
    /// Realised outcome labels.
    pub y: Vec<Vec<Label>>,
    /// Decisions taken by the model deployed during generation.
    pub decisions: Vec<Vec<Label>>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    id: usize,
    s: u8,
    x: Vec<Vec<f64>>,
    y: Vec<Label>,
    decision: Vec<Label>,
}

/// First line of every JSONL file written by this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub header: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl PanelDataset {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Number of recorded steps `l`.
    pub fn steps(&self) -> usize {
        self.x.first().map_or(0, |t| t.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.x.first().and_then(|t| t.first()).map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.s.len();
        if n == 0 {
            return Err(Error::Empty("panel dataset"));
        }
        if self.x.len() != n || self.y.len() != n || self.decisions.len() != n {
            return Err(Error::Config("panel columns have different numbers of individuals".into()));
        }
        let l = self.steps();
        let d = self.feature_dim();
        if l == 0 || d == 0 {
            return Err(Error::Empty("panel trajectories"));
        }
        for i in 0..n {
            if self.s[i] > 1 {
                return Err(Error::Config(format!("individual {i}: s must be 0 or 1")));
            }
            if self.x[i].len() != l || self.y[i].len() != l || self.decisions[i].len() != l {
                return Err(Error::Config(format!("individual {i}: trajectory length differs from {l}")));
            }
            if self.x[i].iter().any(|v| v.len() != d) {
                return Err(Error::Dimension { expected: d, got: self.x[i].iter().map(|v| v.len()).find(|&k| k != d).unwrap() });
            }
            if self.y[i].iter().chain(&self.decisions[i]).any(|&v| v != 1 && v != -1) {
                return Err(Error::Config(format!("individual {i}: labels must be +1 or -1")));
            }
        }
        Ok(())
    }

    /// Group sizes `[n(s-), n(s+)]`.
    pub fn group_sizes(&self) -> [usize; 2] {
        let plus = self.s.iter().filter(|&&s| s == 1).count();
        [self.s.len() - plus, plus]
    }

    /// Fraction of positive outcome labels at each step.
    pub fn label_base_rates(&self) -> Vec<f64> {
        (0..self.steps())
            .map(|t| self.y.iter().filter(|y| y[t] == 1).count() as f64 / self.len() as f64)
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W, header: &JsonlHeader) -> Result<()> {
        let line = serde_json::to_string(header)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<panel>", e))?;
        for i in 0..self.len() {
            let rec = TrajectoryLine {
                id: i,
                s: self.s[i],
                x: self.x[i].clone(),
                y: self.y[i].clone(),
                decision: self.decisions[i].clone(),
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<panel>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<(Option<JsonlHeader>, Self)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut ds = PanelDataset { s: vec![], x: vec![], y: vec![], decisions: vec![] };
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)?;
            if value.get("header").is_some() {
                header = Some(serde_json::from_value(value)?);
                continue;
            }
            let rec: TrajectoryLine = serde_json::from_value(value)?;
            ds.s.push(rec.s);
            ds.x.push(rec.x);
            ds.y.push(rec.y);
            ds.decisions.push(rec.decision);
        }
        ds.validate()?;
        Ok((header, ds))
    }
}
