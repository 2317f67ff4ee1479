use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::envs::collect::{CollectionPolicy, CollectionSpec, PdGains};
use crate::envs::{ArmConfig, EnvConfig, InsertionConfig, PointMassConfig, TaskCost};
use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::nn::TrainConfig;
use crate::priors::GmmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Gaussian,
    Gmm,
    Nn1,
    Nn2,
}

impl PriorFamily {
    pub const ALL: [PriorFamily; 4] = [PriorFamily::Gaussian, PriorFamily::Gmm, PriorFamily::Nn1, PriorFamily::Nn2];

    pub fn name(&self) -> &'static str {
        match self {
            PriorFamily::Gaussian => "gaussian",
            PriorFamily::Gmm => "gmm",
            PriorFamily::Nn1 => "nn1",
            PriorFamily::Nn2 => "nn2",
        }
    }
}

impl std::str::FromStr for PriorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prior family {s:?}")))
    }
}

/// One dataset to collect: an environment, a tagged collection policy and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub env: EnvConfig,
    pub collection: CollectionSpec,
    pub seed: u64,
}

impl DataSource {
    pub fn task(&self) -> &str {
        &self.collection.task
    }
}

/// An evaluation task and the dataset tags its prior may be trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    pub env: EnvConfig,
    pub sources: Vec<String>,
    /// Tag excluded from the prior's training data.
    #[serde(default)]
    pub holdout: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub n0: f64,
    pub m: f64,
    /// State-action covariance scale for network priors.
    pub alpha: f64,
    pub gmm: GmmConfig,
    pub train: TrainConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { n0: 1.0, m: 1.0, alpha: 0.1, gmm: GmmConfig::default(), train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub prior_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "runs/data".into(), prior_dir: "runs/priors".into(), out_dir: "runs/results".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    pub task: String,
    pub family: PriorFamily,
    /// Target offset magnitudes in metres.
    pub offsets: Vec<f64>,
    pub adapt: Vec<bool>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            task: "insertion".into(),
            family: PriorFamily::Nn2,
            offsets: vec![0.0, 0.005, 0.01, 0.015],
            adapt: vec![true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: Vec<DataSource>,
    pub tasks: Vec<EvalTask>,
    pub families: Vec<PriorFamily>,
    pub adapt: Vec<bool>,
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    pub seed: u64,
    pub steps: usize,
    /// Validate and emit an empty table without running trials.
    pub dry_run: bool,
    pub cost: TaskCost,
    pub mpc: MpcConfig,
    pub prior: PriorConfig,
    pub robustness: RobustnessConfig,
    pub paths: Paths,
}

fn reach_gains() -> PdGains {
    PdGains { kp: 60.0, kd: 8.0, noise: 0.1 }
}

pub fn default_data_sources() -> Vec<DataSource> {
    let arm = EnvConfig::Arm(ArmConfig::default());
    let insertion = EnvConfig::Insertion(InsertionConfig::default());
    let pm = EnvConfig::PointMass(PointMassConfig::default());
    let spec = |task: &str, policy, episodes, steps, init_jitter| CollectionSpec {
        task: task.into(),
        policy,
        episodes,
        steps,
        init_jitter,
    };
    vec![
        DataSource {
            env: arm.clone(),
            collection: spec("free", CollectionPolicy::RandomTorque { scale: 0.3, hold: 4 }, 80, 100, 0.5),
            seed: 1,
        },
        DataSource {
            env: arm,
            collection: spec(
                "reach",
                CollectionPolicy::ScriptedReach {
                    x_range: [-0.3, 0.7],
                    y_range: [0.0, 0.8],
                    gains: reach_gains(),
                    retarget: 50,
                },
                20,
                100,
                0.3,
            ),
            seed: 2,
        },
        DataSource {
            env: insertion.clone(),
            collection: spec(
                "surface",
                CollectionPolicy::Waypoints {
                    points: vec![[0.3, -0.45], [0.3, -0.51], [0.42, -0.51]],
                    jitter: 0.05,
                    tolerance: 0.015,
                    gains: reach_gains(),
                },
                20,
                100,
                0.1,
            ),
            seed: 3,
        },
        DataSource {
            env: insertion,
            collection: spec(
                "insertion",
                CollectionPolicy::Waypoints {
                    points: vec![[0.55, -0.42], [0.55, -0.5], [0.55, -0.57]],
                    jitter: 0.01,
                    tolerance: 0.01,
                    gains: reach_gains(),
                },
                20,
                100,
                0.05,
            ),
            seed: 4,
        },
        DataSource {
            env: pm.clone(),
            collection: spec("pm_random", CollectionPolicy::RandomTorque { scale: 0.5, hold: 4 }, 10, 100, 0.2),
            seed: 5,
        },
        DataSource {
            env: pm,
            collection: spec(
                "pm_reach",
                CollectionPolicy::ScriptedReach {
                    x_range: [-0.4, 0.4],
                    y_range: [-0.4, 0.4],
                    gains: PdGains { kp: 20.0, kd: 6.0, noise: 0.1 },
                    retarget: 50,
                },
                10,
                100,
                0.2,
            ),
            seed: 6,
        },
    ]
}

pub fn default_tasks() -> Vec<EvalTask> {
    let arm_sources = vec!["free".to_string(), "reach".into(), "surface".into(), "insertion".into()];
    vec![
        EvalTask {
            name: "reach".into(),
            env: EnvConfig::Arm(ArmConfig::default()),
            sources: arm_sources.clone(),
            holdout: Some("reach".into()),
        },
        EvalTask {
            name: "insertion".into(),
            env: EnvConfig::Insertion(InsertionConfig::default()),
            sources: arm_sources,
            holdout: Some("insertion".into()),
        },
        EvalTask {
            name: "point_mass".into(),
            env: EnvConfig::PointMass(PointMassConfig::default()),
            sources: vec!["pm_random".into(), "pm_reach".into()],
            holdout: Some("pm_reach".into()),
        },
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            data: default_data_sources(),
            tasks: default_tasks(),
            families: PriorFamily::ALL.to_vec(),
            adapt: vec![true, false],
            trials: 10,
            seed: 0,
            steps: 200,
            dry_run: false,
            cost: TaskCost::default(),
            mpc: MpcConfig { noise_scale: 0.01, ..MpcConfig::default() },
            prior: PriorConfig::default(),
            robustness: RobustnessConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFiles(vec![path.display().to_string()]));
        }
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.trials == 0 && !self.dry_run {
            return Err(Error::Config("trials must be at least 1 outside dry-run mode".into()));
        }
        if self.robustness.offsets.iter().any(|o| !(o.is_finite() && *o >= 0.0)) {
            return Err(Error::Config("target offsets must be nonnegative".into()));
        }
        if !(self.cost.alpha > 0.0) {
            return Err(Error::Config("cost alpha must be positive".into()));
        }
        let tags: Vec<&str> = self.data.iter().map(|d| d.task()).collect();
        for t in &self.tasks {
            t.env.build()?;
            if t.sources.is_empty() {
                return Err(Error::Config(format!("task {} has no prior data sources", t.name)));
            }
            for s in &t.sources {
                if !tags.contains(&s.as_str()) {
                    return Err(Error::Config(format!("task {} names unknown data source {s}", t.name)));
                }
            }
        }
        for d in &self.data {
            d.env.build()?;
        }
        self.mpc.validate()
    }

    pub fn task(&self, name: &str) -> Result<&EvalTask> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task {name:?}")))
    }

    /// Sets a dotted path such as `mpc.horizon` to a JSON-parsed value, falling
    /// back to a plain string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut doc;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?,
                Value::Array(items) => {
                    let i: usize = part.parse().map_err(|_| Error::Config(format!("expected index in {key:?}")))?;
                    let len = items.len();
                    items
                        .get_mut(i)
                        .ok_or_else(|| Error::Config(format!("index {i} out of range ({len}) in {key:?}")))?
                }
                _ => return Err(Error::Config(format!("{key:?} descends into a scalar"))),
            };
        }
        *node = value;
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(cfg)
    }

    /// Applies `KEY=VAL` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut cfg = self.clone();
        for s in sets {
            let (k, v) = s
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not KEY=VAL", s.as_ref())))?;
            cfg = cfg.with_override(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&doc).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
