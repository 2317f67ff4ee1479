//! Receding-horizon control loop with online adaptation of the local dynamics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, Simulator, DIVERGENCE_NORM};
use crate::error::{Error, Result};
use crate::estimator::{AdaptConfig, Adaptation, RunningMoments};
use crate::gaussian::{condition_dynamics, niw_map_update, LinearGaussianDynamics, MeanRule};
use crate::ilqr::{ilqr_solve, CostModel, IlqrOptions, IlqrResult, InitialGuess, PolicyStep, TimeVaryingLinearPolicy};
use crate::linalg::{self, serde_vector};
use crate::priors::{DynamicsPrior, PriorContext};
use crate::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Control rate in Hz.
    pub rate: f64,
    pub gamma: f64,
    pub ilqr_iterations: usize,
    /// Scale of the exploration covariance `Q_uu⁻¹`.
    pub noise_scale: f64,
    pub adapt: bool,
    pub seed: u64,
    pub mean_rule: MeanRule,
    pub adaptation: AdaptConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            rate: 20.0,
            gamma: 0.95,
            ilqr_iterations: 2,
            noise_scale: 1.0,
            adapt: true,
            seed: 0,
            mean_rule: MeanRule::PriorCount,
            adaptation: AdaptConfig::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::Config(format!("rate must be positive, got {}", self.rate)));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config(format!("noise_scale must be nonnegative, got {}", self.noise_scale)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        self.adaptation.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Absent until a transition has been observed or when adaptation is off.
    pub rho: Option<f64>,
    pub beta: f64,
    pub n_eff: f64,
    pub planned_cost: f64,
    pub wall_ms: f64,
    /// The planner failed and the shifted previous policy was used instead.
    pub degraded: bool,
    /// Local model used for planning; absent when conditioning failed.
    pub dynamics: Option<LinearGaussianDynamics>,
}

/// Everything that persists between ticks of one episode.
pub struct Controller {
    prior: Arc<dyn DynamicsPrior>,
    pub moments: RunningMoments,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    warm: Option<TimeVaryingLinearPolicy>,
    rng: ChaCha8Rng,
    cfg: MpcConfig,
    dx: usize,
    du: usize,
    action_limit: Option<f64>,
}

/// `u ~ N(û + k + K(x − x̂), noise_scale·Q_uu⁻¹)`.
pub fn sample_action(step: &PolicyStep, x: &DVector<f64>, noise_scale: f64, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let mean = &step.u_hat + &step.offset + &step.gain * (x - &step.x_hat);
    if noise_scale == 0.0 {
        return Ok(mean);
    }
    let cov = exploration_covariance(step, noise_scale)?;
    let l = cov.cholesky().ok_or(Error::BackwardPass { step: 0 })?.unpack();
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + l * z)
}

/// `noise_scale·Q_uu⁻¹`.
pub fn exploration_covariance(step: &PolicyStep, noise_scale: f64) -> Result<DMatrix<f64>> {
    let inv = step.quu.clone().cholesky().ok_or(Error::BackwardPass { step: 0 })?.inverse();
    Ok(linalg::symmetrize(&inv) * noise_scale)
}

impl Controller {
    pub fn new(prior: Arc<dyn DynamicsPrior>, moments: RunningMoments, dx: usize, du: usize, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        linalg::check_dim("moments", moments.dim(), 2 * dx + du)?;
        let rng = rng_from_seed(cfg.seed, 0x6d7063);
        Ok(Self { prior, moments, prev: None, warm: None, rng, cfg, dx, du, action_limit: None })
    }

    /// Clamp returned actions to `±limit`, as the actuator will.
    pub fn with_action_limit(mut self, limit: f64) -> Self {
        self.action_limit = Some(limit);
        self
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn warm_policy(&self) -> Option<&TimeVaryingLinearPolicy> {
        self.warm.as_ref()
    }

    fn action_guess(&self, x: &DVector<f64>) -> DVector<f64> {
        if let Some(w) = &self.warm {
            if w.horizon() > 1 {
                return w.action(1, x);
            }
        }
        match &self.prev {
            Some((_, u)) => u.clone(),
            None => DVector::zeros(self.du),
        }
    }

    /// Observes the latest transition, adapts β and N, fuses prior and
    /// empirical moments and conditions the result.
    pub fn local_dynamics(&mut self, x: &DVector<f64>) -> Result<(LinearGaussianDynamics, Option<Adaptation>)> {
        linalg::check_dim("state", x.len(), self.dx)?;
        if !linalg::all_finite_vec(x) {
            return Err(Error::InvalidInput("non-finite state".into()));
        }
        let u_guess = self.action_guess(x);
        let ctx = match &self.prev {
            Some((xp, up)) => PriorContext::new(xp.clone(), up.clone(), x.clone(), u_guess),
            None => PriorContext::first_tick(x.clone(), u_guess),
        };
        let niw = self.prior.evaluate(&ctx)?;
        if !self.cfg.adapt {
            return Ok((condition_dynamics(&niw.prior_gaussian(), self.dx, self.du)?, None));
        }
        let adaptation = match &self.prev {
            Some((xp, up)) => {
                self.moments.observe(&linalg::stack(&[xp, up, x]))?;
                let a = self.moments.adapt(&niw.prior_gaussian(), xp, up, x, &self.cfg.adaptation)?;
                self.moments.apply(&a);
                Some(a)
            }
            None => None,
        };
        let joint = niw_map_update(
            &niw,
            &self.moments.mean,
            &self.moments.covariance(),
            self.moments.n_eff,
            self.cfg.mean_rule,
        )?;
        Ok((condition_dynamics(&joint, self.dx, self.du)?, adaptation))
    }

    /// Plans from `x` under `dynamics`, warm-started from the shifted previous
    /// policy when `warm` is set and one exists.
    pub fn plan<C: CostModel + ?Sized>(
        &self,
        dynamics: &LinearGaussianDynamics,
        x: &DVector<f64>,
        cost: &C,
        warm: bool,
    ) -> Result<IlqrResult> {
        let init = match (&self.warm, warm) {
            (Some(p), true) if p.horizon() == self.cfg.horizon => InitialGuess::Policy(p.shifted()),
            _ => InitialGuess::Controls(vec![DVector::zeros(self.du); self.cfg.horizon]),
        };
        let opts = IlqrOptions { max_iters: self.cfg.ilqr_iterations, ..Default::default() };
        ilqr_solve(dynamics, cost, x, init, self.cfg.gamma, &opts)
    }

    fn clamp(&self, u: DVector<f64>) -> DVector<f64> {
        match self.action_limit {
            Some(l) => u.map(|v| v.clamp(-l, l)),
            None => u,
        }
    }

    fn fallback(&mut self, x: &DVector<f64>) -> DVector<f64> {
        match self.warm.take() {
            Some(p) => {
                let shifted = p.shifted();
                let u = shifted.action(0, x);
                self.warm = Some(shifted);
                u
            }
            None => match &self.prev {
                Some((_, u)) => u.clone(),
                None => DVector::zeros(self.du),
            },
        }
    }

    /// One control tick: returns the action to execute at state `x`.
    pub fn step<C: CostModel + ?Sized>(&mut self, x: &DVector<f64>, cost: &C) -> Result<(DVector<f64>, StepDiagnostics)> {
        let start = Instant::now();
        let planned = match self.local_dynamics(x) {
            Ok((dynamics, adaptation)) => match self.plan(&dynamics, x, cost, true) {
                Ok(res) => Ok((dynamics, adaptation, res)),
                Err(e) => Err((Some(dynamics), e)),
            },
            Err(e) => Err((None, e)),
        };
        let (u, rho, planned_cost, degraded, dynamics) = match planned {
            Ok((dynamics, adaptation, res)) => {
                let u = sample_action(&res.policy.steps[0], x, self.cfg.noise_scale, &mut self.rng)?;
                self.warm = Some(res.policy);
                (u, adaptation.map(|a| a.rho), res.total_cost, false, Some(dynamics))
            }
            Err((dynamics, e)) => match e {
                Error::Conditioning { .. }
                | Error::BackwardPass { .. }
                | Error::Evaluation(_)
                | Error::Domain(_) => {
                    log::warn!("planning failed, reusing previous policy: {e}");
                    (self.fallback(x), None, f64::NAN, true, dynamics)
                }
                other => return Err(other),
            },
        };
        let u = self.clamp(u);
        self.prev = Some((x.clone(), u.clone()));
        let diag = StepDiagnostics {
            rho,
            beta: self.moments.beta,
            n_eff: self.moments.n_eff,
            planned_cost,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            degraded,
            dynamics,
        };
        Ok((u, diag))
    }
}

/// One line of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: usize,
    #[serde(with = "serde_vector")]
    pub x: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub u: DVector<f64>,
    pub rho: Option<f64>,
    pub beta: f64,
    pub n_eff: f64,
    pub planned_cost: Option<f64>,
    pub wall_ms: f64,
}

impl TickRecord {
    /// Equal in every field except the wall-clock time.
    pub fn same_trajectory(&self, other: &TickRecord) -> bool {
        let strip = |r: &TickRecord| TickRecord { wall_ms: 0.0, ..r.clone() };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub final_distance: f64,
    /// Time of the first tick within the success threshold.
    pub time_to_success: Option<f64>,
    pub aborted: bool,
    pub degraded_ticks: usize,
    pub steps: usize,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub ticks: Vec<TickRecord>,
    /// Visited states, one more than the number of ticks unless aborted.
    pub states: Vec<DVector<f64>>,
    pub outcome: Outcome,
}

/// Runs `steps` control ticks from the environment's initial state. The
/// episode succeeds when the final distance is within the environment's
/// threshold.
pub fn run_episode<C: CostModel + ?Sized>(
    env: &dyn Environment,
    ctrl: &mut Controller,
    cost: &C,
    steps: usize,
    noise_seed: u64,
) -> Result<Episode> {
    if (ctrl.cfg.dt() - env.dt()).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "controller period {} s does not match environment step {} s",
            ctrl.cfg.dt(),
            env.dt()
        )));
    }
    let mut sim = Simulator::new(env, noise_seed);
    let mut states = vec![sim.state.clone()];
    let mut ticks = Vec::with_capacity(steps);
    let mut time_to_success = None;
    let mut degraded = 0;
    let mut aborted = false;
    if env.is_success(&sim.state) {
        time_to_success = Some(0.0);
    }
    for t in 0..steps {
        let x = sim.state.clone();
        let (u, diag) = ctrl.step(&x, cost)?;
        let applied = sim.step(&u);
        degraded += diag.degraded as usize;
        ticks.push(TickRecord {
            t,
            x,
            u: applied,
            rho: diag.rho,
            beta: diag.beta,
            n_eff: diag.n_eff,
            planned_cost: diag.planned_cost.is_finite().then_some(diag.planned_cost),
            wall_ms: diag.wall_ms,
        });
        if !linalg::all_finite_vec(&sim.state) || sim.state.norm() > DIVERGENCE_NORM {
            aborted = true;
            break;
        }
        states.push(sim.state.clone());
        if time_to_success.is_none() && env.is_success(&sim.state) {
            time_to_success = Some((t + 1) as f64 * env.dt());
        }
    }
    let last = states.last().expect("at least the initial state");
    let final_distance = if aborted { f64::INFINITY } else { env.distance(last) };
    let mean_wall_ms = if ticks.is_empty() { 0.0 } else { ticks.iter().map(|t| t.wall_ms).sum::<f64>() / ticks.len() as f64 };
    let outcome = Outcome {
        success: !aborted && final_distance <= env.success_threshold(),
        final_distance,
        time_to_success: if aborted { None } else { time_to_success },
        aborted,
        degraded_ticks: degraded,
        steps: ticks.len(),
        mean_wall_ms,
    };
    Ok(Episode { ticks, states, outcome })
}

pub fn write_trajectory_log(path: &Path, ticks: &[TickRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in ticks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<TickRecord>> {
    if !path.exists() {
        return Err(Error::MissingFiles(vec![path.display().to_string()]));
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
