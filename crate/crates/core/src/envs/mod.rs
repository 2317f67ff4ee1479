//! Simulated desk-scale tasks: a point mass, a planar two-link arm, and the
//! same arm with a slotted contact surface.

mod arm;
pub mod collect;
pub mod cost;
pub mod geometry;
mod insertion;
mod point_mass;

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use arm::{ArmConfig, ArmEnv};
pub use cost::{eval_cost, CostEval, TaskCost, TaskCostModel};
pub use geometry::Geometry;
pub use insertion::{ContactConfig, ContactForce, InsertionConfig, InsertionEnv, SlotSurface};
pub use point_mass::{PointMassConfig, PointMassEnv};

use crate::error::{Error, Result};
use crate::nn::StateLayout;
use crate::rng_from_seed;

/// Control period shared by every environment and the controller.
pub const DEFAULT_DT: f64 = 0.05;
/// States with a larger norm abort the episode.
pub const DIVERGENCE_NORM: f64 = 1e6;

pub trait Environment: Send + Sync {
    fn id(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn dt(&self) -> f64;
    /// Per-coordinate bound on the applied action.
    fn action_limit(&self) -> f64;
    /// Standard deviation of the additive actuation noise.
    fn noise_std(&self) -> f64;
    fn geometry(&self) -> Geometry;
    fn target(&self) -> Vector2<f64>;
    fn success_threshold(&self) -> f64;
    fn initial_state(&self) -> DVector<f64>;
    /// Deterministic one-step map for an already clamped and perturbed action.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn layout(&self) -> StateLayout {
        StateLayout::split_half(self.state_dim() / 2)
    }

    fn clamp_action(&self, u: &DVector<f64>) -> DVector<f64> {
        let lim = self.action_limit();
        u.map(|v| v.clamp(-lim, lim))
    }

    fn sample_noise(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let s = self.noise_std();
        DVector::from_fn(self.action_dim(), |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            s * z
        })
    }

    /// `x′ = dynamics(x, clamp(u) + noise)`.
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>, noise: &DVector<f64>) -> DVector<f64> {
        self.dynamics(x, &(self.clamp_action(u) + noise))
    }

    fn distance(&self, x: &DVector<f64>) -> f64 {
        self.geometry().distance(x, &self.target())
    }

    fn is_success(&self, x: &DVector<f64>) -> bool {
        self.distance(x) <= self.success_threshold()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    PointMass(PointMassConfig),
    Arm(ArmConfig),
    Insertion(InsertionConfig),
}

impl EnvConfig {
    pub fn id(&self) -> &'static str {
        match self {
            EnvConfig::PointMass(_) => "point_mass",
            EnvConfig::Arm(_) => "arm",
            EnvConfig::Insertion(_) => "insertion",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::PointMass(c) => Box::new(point_mass_env(c.clone())?),
            EnvConfig::Arm(c) => Box::new(two_link_arm_env(c.clone())?),
            EnvConfig::Insertion(c) => Box::new(insertion_env(c.clone())?),
        })
    }

    pub fn target(&self) -> [f64; 2] {
        match self {
            EnvConfig::PointMass(c) => c.target,
            EnvConfig::Arm(c) => c.target,
            EnvConfig::Insertion(c) => c.arm.target,
        }
    }

    pub fn set_target(&mut self, target: [f64; 2]) {
        match self {
            EnvConfig::PointMass(c) => c.target = target,
            EnvConfig::Arm(c) => c.target = target,
            EnvConfig::Insertion(c) => c.arm.target = target,
        }
    }

    pub fn set_initial(&mut self, q: [f64; 2]) {
        match self {
            EnvConfig::PointMass(c) => c.initial = q,
            EnvConfig::Arm(c) => c.initial = q,
            EnvConfig::Insertion(c) => c.arm.initial = q,
        }
    }

    pub fn set_noise_fraction(&mut self, f: f64) {
        match self {
            EnvConfig::PointMass(c) => c.noise_fraction = f,
            EnvConfig::Arm(c) => c.noise_fraction = f,
            EnvConfig::Insertion(c) => c.arm.noise_fraction = f,
        }
    }
}

pub fn point_mass_env(cfg: PointMassConfig) -> Result<PointMassEnv> {
    PointMassEnv::new(cfg)
}

pub fn two_link_arm_env(cfg: ArmConfig) -> Result<ArmEnv> {
    ArmEnv::new(cfg)
}

pub fn insertion_env(cfg: InsertionConfig) -> Result<InsertionEnv> {
    InsertionEnv::new(cfg)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn check_nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be nonnegative, got {v}")))
    }
}

/// An environment instance with its current state and actuation-noise stream.
pub struct Simulator<'a> {
    pub env: &'a dyn Environment,
    pub state: DVector<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Simulator<'a> {
    pub fn new(env: &'a dyn Environment, seed: u64) -> Self {
        Self { env, state: env.initial_state(), rng: rng_from_seed(seed, 0x656e76) }
    }

    pub fn reset(&mut self, seed: u64) -> DVector<f64> {
        self.rng = rng_from_seed(seed, 0x656e76);
        self.state = self.env.initial_state();
        self.state.clone()
    }

    /// Applies `u` and returns the clamped command that was executed.
    pub fn step(&mut self, u: &DVector<f64>) -> DVector<f64> {
        let applied = self.env.clamp_action(u);
        let noise = self.env.sample_noise(&mut self.rng);
        self.state = self.env.dynamics(&self.state, &(&applied + noise));
        applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_build() {
        for cfg in [
            EnvConfig::PointMass(PointMassConfig::default()),
            EnvConfig::Arm(ArmConfig::default()),
            EnvConfig::Insertion(InsertionConfig::default()),
        ] {
            let s = serde_json::to_string(&cfg).unwrap();
            let back: EnvConfig = serde_json::from_str(&s).unwrap();
            assert_eq!(back, cfg);
            let env = back.build().unwrap();
            assert_eq!(env.id(), cfg.id());
            assert_eq!(env.state_dim(), 4);
            assert_eq!(env.action_dim(), 2);
            assert_eq!(env.dt(), DEFAULT_DT);
        }
    }

    #[test]
    fn simulator_is_reproducible() {
        let env = ArmEnv::new(ArmConfig::default()).unwrap();
        let u = DVector::from_vec(vec![1.0, -0.5]);
        let run = |seed| {
            let mut sim = Simulator::new(&env, seed);
            for _ in 0..20 {
                sim.step(&u);
            }
            sim.state
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
