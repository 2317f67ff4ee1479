//! Tagged transition records used to train priors and seed the online estimator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_vector};

/// One step `(x_{t-1}, u_{t-1}, x_t, u_t, x_{t+1})` tagged with its task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub task: String,
    #[serde(with = "serde_vector")]
    pub x_prev: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub u_prev: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub x: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub u: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub x_next: DVector<f64>,
}

impl TransitionRecord {
    /// The stacked single-step transition `[x_t; u_t; x_{t+1}]`.
    pub fn transition(&self) -> DVector<f64> {
        linalg::stack(&[&self.x, &self.u, &self.x_next])
    }

    /// `[x_t; u_t]`.
    pub fn state_action(&self) -> DVector<f64> {
        linalg::stack(&[&self.x, &self.u])
    }

    /// `[x_{t-1}; u_{t-1}; x_t; u_t]`.
    pub fn context_input(&self) -> DVector<f64> {
        linalg::stack(&[&self.x_prev, &self.u_prev, &self.x, &self.u])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub dt: f64,
    pub policy: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionDataset {
    pub records: Vec<TransitionRecord>,
    pub meta: DatasetMeta,
}

impl TransitionDataset {
    pub fn new(meta: DatasetMeta) -> Self {
        Self { records: Vec::new(), meta }
    }

    pub fn from_records(records: Vec<TransitionRecord>, meta: DatasetMeta) -> Result<Self> {
        let ds = Self { records, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.records.first().map_or(self.meta.state_dim, |r| r.x.len())
    }

    pub fn action_dim(&self) -> usize {
        self.records.first().map_or(self.meta.action_dim, |r| r.u.len())
    }

    /// Dimension of the stacked transition vector.
    pub fn transition_dim(&self) -> usize {
        2 * self.state_dim() + self.action_dim()
    }

    pub fn push(&mut self, record: TransitionRecord) {
        self.records.push(record);
    }

    pub fn validate(&self) -> Result<()> {
        let (dx, du) = (self.state_dim(), self.action_dim());
        for (i, r) in self.records.iter().enumerate() {
            let ok = r.x_prev.len() == dx
                && r.x.len() == dx
                && r.x_next.len() == dx
                && r.u_prev.len() == du
                && r.u.len() == du;
            if !ok {
                return Err(Error::InvalidInput(format!("record {i} has inconsistent dimensions")));
            }
            if r.task.is_empty() {
                return Err(Error::InvalidInput(format!("record {i} has an empty task tag")));
            }
        }
        Ok(())
    }

    pub fn transitions(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(TransitionRecord::transition).collect()
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.records.iter().map(|r| r.task.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Every record except those tagged with `task`.
    pub fn excluding_task(&self, task: &str) -> Self {
        Self {
            records: self.records.iter().filter(|r| r.task != task).cloned().collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn extend(&mut self, other: &TransitionDataset) {
        if self.records.is_empty() && self.meta.env_id.is_empty() {
            self.meta = other.meta.clone();
        }
        self.records.extend(other.records.iter().cloned());
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        path.with_file_name(name)
    }

    /// Writes one JSON record per line plus a `<path>.meta.json` sidecar.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        std::fs::write(Self::meta_path(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let meta_path = Self::meta_path(path);
        let missing: Vec<String> = [path, meta_path.as_path()]
            .iter()
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let mut records = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Self::from_records(records, meta)
    }
}
