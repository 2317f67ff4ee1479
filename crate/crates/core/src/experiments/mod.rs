//! Desk-scale experiment harness: dataset collection, hold-one-out prior
//! training, the comparison matrix, the target-offset sweep and trial replay.

pub mod config;
pub mod stats;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataSource, EvalTask, ExperimentConfig, PriorFamily};

use crate::dataset::TransitionDataset;
use crate::envs::collect::collect_dataset;
use crate::envs::TaskCostModel;
use crate::error::{Error, Result};
use crate::estimator::{MomentsCheckpoint, RunningMoments};
use crate::mpc::{read_trajectory_log, run_episode, write_trajectory_log, Controller, TickRecord};
use crate::nn::{Architecture, MlpModel, TrainReport};
use crate::priors::{estimate_residual_cov, GaussianPrior, GmmPrior, NeuralNetPrior, PriorModel};
use crate::rng_from_seed;

pub fn dataset_path(cfg: &ExperimentConfig, task: &str) -> PathBuf {
    cfg.paths.data_dir.join(format!("{task}.jsonl"))
}

pub fn prior_path(cfg: &ExperimentConfig, task: &str, family: PriorFamily) -> PathBuf {
    cfg.paths.prior_dir.join(format!("{task}_{}.json", family.name()))
}

fn moments_path(prior: &Path) -> PathBuf {
    prior.with_extension("moments.json")
}

fn report_path(prior: &Path) -> PathBuf {
    prior.with_extension("report.json")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Collects every configured data source in memory.
pub fn collect_all(cfg: &ExperimentConfig) -> Result<Vec<TransitionDataset>> {
    cfg.data
        .par_iter()
        .map(|d| {
            let env = d.env.build()?;
            collect_dataset(env.as_ref(), &d.collection, d.seed)
        })
        .collect()
}

/// Collects every data source and writes `<data_dir>/<task>.jsonl`.
pub fn cmd_collect_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    create_dir(&cfg.paths.data_dir)?;
    let sets = collect_all(cfg)?;
    let mut out = Vec::new();
    for (src, ds) in cfg.data.iter().zip(sets) {
        let path = dataset_path(cfg, src.task());
        ds.save_jsonl(&path)?;
        log::info!("wrote {} records to {}", ds.len(), path.display());
        out.push(path);
    }
    Ok(out)
}

/// Loads the source datasets of `task` from disk.
pub fn load_sources(cfg: &ExperimentConfig, task: &EvalTask) -> Result<Vec<TransitionDataset>> {
    let paths: Vec<PathBuf> = task.sources.iter().map(|s| dataset_path(cfg, s)).collect();
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists() || !TransitionDataset::meta_path(p).exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    paths.iter().map(|p| TransitionDataset::load_jsonl(p)).collect()
}

/// Concatenates `sources` and drops the records tagged with the task's holdout.
pub fn holdout_dataset(task: &EvalTask, sources: &[TransitionDataset]) -> Result<(TransitionDataset, usize)> {
    let tags: std::collections::BTreeSet<String> = sources.iter().flat_map(|s| s.tasks()).collect();
    if tags.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "prior training for {} needs data from at least two tasks, found {}",
            task.name,
            tags.len()
        )));
    }
    let mut all = sources[0].clone();
    for s in &sources[1..] {
        all.extend(s);
    }
    let full = all.len();
    let kept = match &task.holdout {
        Some(h) => all.excluding_task(h),
        None => all,
    };
    if kept.is_empty() {
        return Err(Error::InvalidInput(format!("hold-out leaves no data for {}", task.name)));
    }
    Ok((kept, full))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub task: String,
    pub family: PriorFamily,
    pub holdout: Option<String>,
    pub full_size: usize,
    pub train_size: usize,
    pub input_dim: Option<usize>,
    pub network: Option<TrainReport>,
    pub gmm_iterations: Option<usize>,
}

/// A fitted prior with the moments that bootstrap the online estimator.
#[derive(Debug, Clone)]
pub struct TrainedPrior {
    pub prior: Arc<PriorModel>,
    pub moments: RunningMoments,
    pub report: TrainingReport,
}

pub fn train_prior(
    cfg: &ExperimentConfig,
    task: &EvalTask,
    family: PriorFamily,
    sources: &[TransitionDataset],
) -> Result<TrainedPrior> {
    let (data, full) = holdout_dataset(task, sources)?;
    let p = &cfg.prior;
    let mut report = TrainingReport {
        task: task.name.clone(),
        family,
        holdout: task.holdout.clone(),
        full_size: full,
        train_size: data.len(),
        input_dim: None,
        network: None,
        gmm_iterations: None,
    };
    let prior = match family {
        PriorFamily::Gaussian => PriorModel::Gaussian(GaussianPrior::fit(&data, p.n0, p.m)?),
        PriorFamily::Gmm => {
            let g = GmmPrior::fit(&data, &p.gmm, p.n0, p.m)?;
            report.gmm_iterations = Some(g.objective_history.len());
            PriorModel::Gmm(g)
        }
        PriorFamily::Nn1 | PriorFamily::Nn2 => {
            let arch = if family == PriorFamily::Nn1 { Architecture::Markov } else { Architecture::Context };
            let env = task.env.build()?;
            let mut net =
                MlpModel::new(arch, env.state_dim(), env.action_dim(), env.layout(), env.dt(), p.train.seed)?;
            let tr = net.train(&data, &p.train)?;
            report.input_dim = Some(net.input_dim());
            report.network = Some(tr);
            let resid = estimate_residual_cov(&net, &data)?;
            PriorModel::Network(NeuralNetPrior::new(net, p.alpha, resid, p.n0, p.m)?)
        }
    };
    let moments = RunningMoments::from_dataset(&data, &cfg.mpc.adaptation)?;
    Ok(TrainedPrior { prior: Arc::new(prior), moments, report })
}

pub type PriorStore = BTreeMap<(String, PriorFamily), TrainedPrior>;

/// Trains every `(task, family)` pair from in-memory datasets keyed by tag.
pub fn train_all(
    cfg: &ExperimentConfig,
    tasks: &[&EvalTask],
    families: &[PriorFamily],
    data: &BTreeMap<String, TransitionDataset>,
) -> Result<PriorStore> {
    let jobs: Vec<(&EvalTask, PriorFamily)> =
        tasks.iter().flat_map(|t| families.iter().map(move |f| (*t, *f))).collect();
    let trained = jobs
        .par_iter()
        .map(|(t, f)| {
            let sources = t
                .sources
                .iter()
                .map(|s| data.get(s).cloned().ok_or_else(|| Error::MissingFiles(vec![s.clone()])))
                .collect::<Result<Vec<_>>>()?;
            Ok(((t.name.clone(), *f), train_prior(cfg, t, *f, &sources)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(trained.into_iter().collect())
}

/// Trains the configured priors from datasets on disk and writes the prior,
/// bootstrap moments and training report for each.
pub fn cmd_train_prior(cfg: &ExperimentConfig) -> Result<Vec<TrainingReport>> {
    cfg.validate()?;
    create_dir(&cfg.paths.prior_dir)?;
    let mut data = BTreeMap::new();
    for t in &cfg.tasks {
        for (tag, ds) in t.sources.iter().zip(load_sources(cfg, t)?) {
            data.insert(tag.clone(), ds);
        }
    }
    let tasks: Vec<&EvalTask> = cfg.tasks.iter().collect();
    let store = train_all(cfg, &tasks, &cfg.families, &data)?;
    let mut reports = Vec::new();
    for ((task, family), tp) in store {
        let path = prior_path(cfg, &task, family);
        fs::write(&path, tp.prior.to_json()?)?;
        fs::write(moments_path(&path), serde_json::to_string(&tp.moments.to_checkpoint())?)?;
        fs::write(report_path(&path), serde_json::to_string_pretty(&tp.report)?)?;
        log::info!("wrote {}", path.display());
        reports.push(tp.report);
    }
    Ok(reports)
}

pub fn load_prior(cfg: &ExperimentConfig, task: &str, family: PriorFamily) -> Result<TrainedPrior> {
    let path = prior_path(cfg, task, family);
    let mpath = moments_path(&path);
    let missing: Vec<String> =
        [&path, &mpath].iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let prior = PriorModel::from_json(&fs::read_to_string(&path)?)?;
    let ck: MomentsCheckpoint = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    let report = match fs::read_to_string(report_path(&path)) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => TrainingReport {
            task: task.into(),
            family,
            holdout: None,
            full_size: 0,
            train_size: 0,
            input_dim: None,
            network: None,
            gmm_iterations: None,
        },
    };
    Ok(TrainedPrior { prior: Arc::new(prior), moments: RunningMoments::from_checkpoint(&ck)?, report })
}

/// Identifies one trial of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Position in the run; names the trajectory log.
    pub index: usize,
    pub task: String,
    pub family: PriorFamily,
    pub adapt: bool,
    /// Target offset magnitude (m).
    pub offset: f64,
    pub trial: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    #[serde(flatten)]
    pub spec: TrialSpec,
    pub success: bool,
    pub final_distance: Option<f64>,
    pub time_to_success: Option<f64>,
    pub aborted: bool,
    pub degraded_ticks: usize,
    pub mean_wall_ms: f64,
    pub error: Option<String>,
    pub log: Option<String>,
    pub config_hash: String,
}

/// Planar unit direction of the target offset for trial seed `seed`, shared by
/// every magnitude and controller variant.
pub fn offset_direction(seed: u64) -> Vector2<f64> {
    let mut rng = rng_from_seed(seed, 0x6f6666);
    let theta: f64 = rng.random_range(0.0..2.0 * PI);
    Vector2::new(theta.cos(), theta.sin())
}

/// Runs one trial and returns its result and trajectory log.
pub fn run_trial(
    cfg: &ExperimentConfig,
    spec: &TrialSpec,
    trained: &TrainedPrior,
) -> Result<(TrialResult, Vec<TickRecord>)> {
    let task = cfg.task(&spec.task)?;
    let env = task.env.build()?;
    let aim = env.target() + offset_direction(spec.seed) * spec.offset;
    let cost = TaskCostModel { cost: cfg.cost.with_target(aim), geometry: env.geometry() };
    let mut mpc = cfg.mpc.clone();
    mpc.adapt = spec.adapt;
    mpc.seed = spec.seed;
    let mut ctrl = Controller::new(
        trained.prior.clone(),
        trained.moments.clone(),
        env.state_dim(),
        env.action_dim(),
        mpc,
    )?
    .with_action_limit(env.action_limit());
    let ep = run_episode(env.as_ref(), &mut ctrl, &cost, cfg.steps, spec.seed)?;
    let o = &ep.outcome;
    let result = TrialResult {
        spec: spec.clone(),
        success: o.success,
        final_distance: o.final_distance.is_finite().then_some(o.final_distance),
        time_to_success: o.time_to_success,
        aborted: o.aborted,
        degraded_ticks: o.degraded_ticks,
        mean_wall_ms: o.mean_wall_ms,
        error: None,
        log: None,
        config_hash: cfg.hash(),
    };
    Ok((result, ep.ticks))
}

fn failed_trial(cfg: &ExperimentConfig, spec: &TrialSpec, e: &Error) -> TrialResult {
    TrialResult {
        spec: spec.clone(),
        success: false,
        final_distance: None,
        time_to_success: None,
        aborted: true,
        degraded_ticks: 0,
        mean_wall_ms: 0.0,
        error: Some(e.to_string()),
        log: None,
        config_hash: cfg.hash(),
    }
}

/// Trial specs for every cell, `trials` per cell, seeds `seed + trial`.
pub fn matrix_specs(cfg: &ExperimentConfig) -> Vec<TrialSpec> {
    let mut specs = Vec::new();
    for t in &cfg.tasks {
        for f in &cfg.families {
            for a in &cfg.adapt {
                push_cell(cfg, &mut specs, &t.name, *f, *a, 0.0);
            }
        }
    }
    specs
}

pub fn robustness_specs(cfg: &ExperimentConfig) -> Vec<TrialSpec> {
    let r = &cfg.robustness;
    let mut specs = Vec::new();
    for a in &r.adapt {
        for o in &r.offsets {
            push_cell(cfg, &mut specs, &r.task, r.family, *a, *o);
        }
    }
    specs
}

fn push_cell(cfg: &ExperimentConfig, specs: &mut Vec<TrialSpec>, task: &str, family: PriorFamily, adapt: bool, offset: f64) {
    for trial in 0..cfg.trials {
        specs.push(TrialSpec {
            index: specs.len(),
            task: task.to_string(),
            family,
            adapt,
            offset,
            trial,
            seed: cfg.seed + trial as u64,
        });
    }
}

/// Runs `specs` in parallel; crashed trials count as failures. Logs are
/// written to `log_dir` when given.
pub fn run_trials(
    cfg: &ExperimentConfig,
    specs: &[TrialSpec],
    store: &PriorStore,
    log_dir: Option<&Path>,
) -> Result<Vec<TrialResult>> {
    specs
        .par_iter()
        .map(|spec| {
            let trained = store
                .get(&(spec.task.clone(), spec.family))
                .ok_or_else(|| Error::Config(format!("no prior for {} / {}", spec.task, spec.family.name())))?;
            let mut result = match run_trial(cfg, spec, trained) {
                Ok((mut r, ticks)) => {
                    if let Some(dir) = log_dir {
                        let name = format!("trial_{}.jsonl", spec.index);
                        write_trajectory_log(&dir.join(&name), &ticks)?;
                        r.log = Some(name);
                    }
                    r
                }
                Err(e) => {
                    log::warn!("trial {} failed: {e}", spec.index);
                    failed_trial(cfg, spec, &e)
                }
            };
            result.config_hash = cfg.hash();
            Ok(result)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub task: String,
    pub family: PriorFamily,
    pub adapt: bool,
    pub offset: f64,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_time_to_success: Option<f64>,
    pub mean_final_distance: Option<f64>,
    pub mean_degraded_ticks: f64,
    pub mean_wall_ms: f64,
    pub crashed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    pub trials: Vec<TrialResult>,
}

pub const CSV_HEADER: &str = "task,family,adapt,offset,successes,trials,success_rate,ci_low,ci_high,\
mean_time_to_success,mean_final_distance,mean_degraded_ticks,mean_wall_ms,crashed,config_hash,seed";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultsTable {
    /// Groups trials into cells in order of first appearance.
    pub fn from_trials(cfg: &ExperimentConfig, trials: Vec<TrialResult>) -> Self {
        let mut keys: Vec<(String, PriorFamily, bool, u64)> = Vec::new();
        for t in &trials {
            let k = (t.spec.task.clone(), t.spec.family, t.spec.adapt, t.spec.offset.to_bits());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let cells = keys
            .into_iter()
            .map(|(task, family, adapt, off)| {
                let rows: Vec<&TrialResult> = trials
                    .iter()
                    .filter(|t| {
                        t.spec.task == task && t.spec.family == family && t.spec.adapt == adapt && t.spec.offset.to_bits() == off
                    })
                    .collect();
                let n = rows.len();
                let successes = rows.iter().filter(|r| r.success).count();
                let (ci_low, ci_high) = stats::wilson_interval(successes, n, stats::Z95);
                CellSummary {
                    task,
                    family,
                    adapt,
                    offset: f64::from_bits(off),
                    successes,
                    trials: n,
                    success_rate: successes as f64 / n as f64,
                    ci_low,
                    ci_high,
                    mean_time_to_success: stats::mean(
                        rows.iter().filter(|r| r.success).filter_map(|r| r.time_to_success),
                    ),
                    mean_final_distance: stats::mean(rows.iter().filter_map(|r| r.final_distance)),
                    mean_degraded_ticks: stats::mean(rows.iter().map(|r| r.degraded_ticks as f64)).unwrap_or(0.0),
                    mean_wall_ms: stats::mean(rows.iter().map(|r| r.mean_wall_ms)).unwrap_or(0.0),
                    crashed: rows.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect();
        Self { config_hash: cfg.hash(), seed: cfg.seed, cells, trials }
    }

    pub fn cell(&self, task: &str, family: PriorFamily, adapt: bool, offset: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.family == family && c.adapt == adapt && c.offset == offset)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.task,
                c.family.name(),
                c.adapt,
                c.offset,
                c.successes,
                c.trials,
                c.success_rate,
                c.ci_low,
                c.ci_high,
                opt(c.mean_time_to_success),
                opt(c.mean_final_distance),
                c.mean_degraded_ticks,
                c.mean_wall_ms,
                c.crashed,
                self.config_hash,
                self.seed
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        fs::write(dir.join("results.csv"), self.to_csv())?;
        fs::write(dir.join("results.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("results.json");
        if !path.exists() {
            return Err(Error::MissingFiles(vec![path.display().to_string()]));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn load_store(cfg: &ExperimentConfig, specs: &[TrialSpec]) -> Result<PriorStore> {
    let mut store = PriorStore::new();
    let mut missing = Vec::new();
    for s in specs {
        let key = (s.task.clone(), s.family);
        if store.contains_key(&key) {
            continue;
        }
        match load_prior(cfg, &s.task, s.family) {
            Ok(p) => {
                store.insert(key, p);
            }
            Err(Error::MissingFiles(m)) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(store)
}

fn run_and_write(cfg: &ExperimentConfig, specs: Vec<TrialSpec>) -> Result<ResultsTable> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json_pretty()?)?;
    let trials = if cfg.dry_run {
        Vec::new()
    } else {
        let store = load_store(cfg, &specs)?;
        run_trials(cfg, &specs, &store, Some(out))?
    };
    let table = ResultsTable::from_trials(cfg, trials);
    table.write(out)?;
    Ok(table)
}

/// Every task × prior family × adaptation setting, `trials` times each.
pub fn cmd_run_matrix(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    run_and_write(cfg, matrix_specs(cfg))
}

/// Target-offset sweep on the robustness task.
pub fn cmd_robustness(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    run_and_write(cfg, robustness_specs(cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub index: usize,
    pub ticks: usize,
    /// Every logged field except wall-clock time matches exactly.
    pub identical: bool,
    pub max_abs_diff: f64,
    pub replay_log: String,
}

/// Largest absolute difference between two logs over states, actions and
/// diagnostics; infinite when their shapes differ.
pub fn log_difference(a: &[TickRecord], b: &[TickRecord]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    let num = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    for (p, q) in a.iter().zip(b) {
        if p.t != q.t || p.x.len() != q.x.len() || p.u.len() != q.u.len() {
            return f64::INFINITY;
        }
        worst = worst
            .max((&p.x - &q.x).amax())
            .max((&p.u - &q.u).amax())
            .max(num(p.rho, q.rho))
            .max((p.beta - q.beta).abs())
            .max((p.n_eff - q.n_eff).abs())
            .max(num(p.planned_cost, q.planned_cost));
    }
    worst
}

/// Re-runs trial `index` from a results directory using its saved config and
/// compares the new trajectory log with the stored one.
pub fn cmd_replay(out_dir: &Path, index: usize) -> Result<ReplayReport> {
    let cfg = ExperimentConfig::load(&out_dir.join("config.json"))?;
    let table = ResultsTable::load(out_dir)?;
    let original = table
        .trials
        .iter()
        .find(|t| t.spec.index == index)
        .ok_or_else(|| Error::Config(format!("no trial {index} in {}", out_dir.display())))?;
    let log_name = original.log.clone().ok_or_else(|| Error::Config(format!("trial {index} has no log")))?;
    let before = read_trajectory_log(&out_dir.join(&log_name))?;
    let trained = load_prior(&cfg, &original.spec.task, original.spec.family)?;
    let (_, after) = run_trial(&cfg, &original.spec, &trained)?;
    let replay_log = format!("replay_{index}.jsonl");
    write_trajectory_log(&out_dir.join(&replay_log), &after)?;
    let after = read_trajectory_log(&out_dir.join(&replay_log))?;
    let identical = before.len() == after.len() && before.iter().zip(&after).all(|(a, b)| a.same_trajectory(b));
    Ok(ReplayReport { index, ticks: after.len(), identical, max_abs_diff: log_difference(&before, &after), replay_log })
}
