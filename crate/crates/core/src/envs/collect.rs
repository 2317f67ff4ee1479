//! Open-loop and scripted data-collection policies.

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::dataset::{DatasetMeta, TransitionDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CollectionPolicy {
    /// Piecewise-constant uniform actions held for `hold` steps.
    RandomTorque { scale: f64, hold: usize },
    /// Task-space PD toward a random target drawn from a box, redrawn every
    /// `retarget` steps.
    ScriptedReach { x_range: [f64; 2], y_range: [f64; 2], gains: PdGains, retarget: usize },
    /// Task-space PD through a jittered sequence of end-effector waypoints.
    Waypoints { points: Vec<[f64; 2]>, jitter: f64, tolerance: f64, gains: PdGains },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    /// Gaussian action noise as a fraction of the action limit.
    pub noise: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 60.0, kd: 8.0, noise: 0.1 }
    }
}

impl CollectionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CollectionPolicy::RandomTorque { .. } => "random_torque",
            CollectionPolicy::ScriptedReach { .. } => "scripted_reach",
            CollectionPolicy::Waypoints { .. } => "waypoints",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            CollectionPolicy::RandomTorque { scale, hold } => *scale >= 0.0 && *hold >= 1,
            CollectionPolicy::ScriptedReach { x_range, y_range, retarget, .. } => {
                x_range[0] <= x_range[1] && y_range[0] <= y_range[1] && *retarget >= 1
            }
            CollectionPolicy::Waypoints { points, jitter, tolerance, .. } => {
                !points.is_empty() && *jitter >= 0.0 && *tolerance > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} policy parameters", self.name())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSpec {
    pub task: String,
    pub policy: CollectionPolicy,
    pub episodes: usize,
    pub steps: usize,
    /// Uniform perturbation of the initial joint positions (rad or m).
    #[serde(default)]
    pub init_jitter: f64,
}

enum EpisodeState {
    Random { action: DVector<f64> },
    Reach { target: Vector2<f64> },
    Waypoints { points: Vec<Vector2<f64>>, index: usize },
}

fn pd_action(env: &dyn Environment, x: &DVector<f64>, goal: &Vector2<f64>, g: &PdGains, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let geom = env.geometry();
    let p = geom.end_effector(x);
    let v = geom.end_effector_velocity(x);
    let force = (goal - p) * g.kp - v * g.kd;
    let tau = geom.jacobian(x).transpose() * force;
    let lim = env.action_limit();
    DVector::from_fn(env.action_dim(), |i, _| {
        let z: f64 = rng.sample(StandardNormal);
        tau[i] + g.noise * lim * z
    })
}

fn uniform_action(env: &dyn Environment, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let lim = scale * env.action_limit();
    DVector::from_fn(env.action_dim(), |_, _| if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 })
}

fn sample_in(range: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
    if range[0] < range[1] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn start_episode(policy: &CollectionPolicy, env: &dyn Environment, rng: &mut ChaCha8Rng) -> EpisodeState {
    match policy {
        CollectionPolicy::RandomTorque { scale, .. } => EpisodeState::Random { action: uniform_action(env, *scale, rng) },
        CollectionPolicy::ScriptedReach { x_range, y_range, .. } => {
            EpisodeState::Reach { target: Vector2::new(sample_in(*x_range, rng), sample_in(*y_range, rng)) }
        }
        CollectionPolicy::Waypoints { points, jitter, .. } => {
            let j = *jitter;
            let off = if j > 0.0 {
                Vector2::new(rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                Vector2::zeros()
            };
            let n = points.len();
            let points = points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    // The final waypoint stays put so every episode ends at the goal.
                    let scale = if i + 1 == n { 0.0 } else { 1.0 };
                    Vector2::new(p[0], p[1]) + off * scale
                })
                .collect();
            EpisodeState::Waypoints { points, index: 0 }
        }
    }
}

fn next_action(
    policy: &CollectionPolicy,
    state: &mut EpisodeState,
    env: &dyn Environment,
    t: usize,
    x: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    match (policy, state) {
        (CollectionPolicy::RandomTorque { scale, hold }, EpisodeState::Random { action }) => {
            if t > 0 && t % hold == 0 {
                *action = uniform_action(env, *scale, rng);
            }
            action.clone()
        }
        (CollectionPolicy::ScriptedReach { x_range, y_range, gains, retarget }, EpisodeState::Reach { target }) => {
            if t > 0 && t % retarget == 0 {
                *target = Vector2::new(sample_in(*x_range, rng), sample_in(*y_range, rng));
            }
            pd_action(env, x, target, gains, rng)
        }
        (CollectionPolicy::Waypoints { tolerance, gains, .. }, EpisodeState::Waypoints { points, index }) => {
            let p = env.geometry().end_effector(x);
            if *index + 1 < points.len() && (p - points[*index]).norm() < *tolerance {
                *index += 1;
            }
            pd_action(env, x, &points[*index], gains, rng)
        }
        _ => unreachable!("episode state matches its policy"),
    }
}

/// Rolls out `spec.episodes` episodes of `spec.steps` actions each. Every
/// episode contributes `steps − 1` records, since the first step has no
/// predecessor.
pub fn collect_dataset(env: &dyn Environment, spec: &CollectionSpec, seed: u64) -> Result<TransitionDataset> {
    spec.policy.validate()?;
    if spec.task.is_empty() {
        return Err(Error::Config("task tag must be nonempty".into()));
    }
    if !(spec.init_jitter.is_finite() && spec.init_jitter >= 0.0) {
        return Err(Error::Config("init_jitter must be nonnegative".into()));
    }
    let meta = DatasetMeta {
        env_id: env.id().to_string(),
        dt: env.dt(),
        policy: spec.policy.name().to_string(),
        seed,
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        episodes: spec.episodes,
    };
    let mut data = TransitionDataset::new(meta);
    let npos = env.layout().position.len();
    for ep in 0..spec.episodes {
        let mut rng = rng_from_seed(seed, ep as u64);
        let mut x = env.initial_state();
        if spec.init_jitter > 0.0 {
            for i in 0..npos {
                x[i] += rng.random_range(-spec.init_jitter..=spec.init_jitter);
            }
        }
        let mut state = start_episode(&spec.policy, env, &mut rng);
        let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
        for t in 0..spec.steps {
            let raw = next_action(&spec.policy, &mut state, env, t, &x, &mut rng);
            let u = env.clamp_action(&raw);
            let noise = env.sample_noise(&mut rng);
            let x_next = env.dynamics(&x, &(&u + noise));
            if let Some((xp, up)) = prev.take() {
                data.push(TransitionRecord {
                    task: spec.task.clone(),
                    x_prev: xp,
                    u_prev: up,
                    x: x.clone(),
                    u: u.clone(),
                    x_next: x_next.clone(),
                });
            }
            prev = Some((x, u));
            x = x_next;
        }
    }
    Ok(data)
}
