use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::{check_nonnegative, check_positive, Environment, Geometry, DEFAULT_DT};
use crate::error::Result;
use crate::gaussian::LinearGaussianDynamics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub mass: f64,
    pub drag: f64,
    pub dt: f64,
    pub force_limit: f64,
    /// Actuation noise standard deviation as a fraction of `force_limit`.
    pub noise_fraction: f64,
    pub initial: [f64; 2],
    pub target: [f64; 2],
    pub success_threshold: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            mass: 1.0,
            drag: 0.5,
            dt: DEFAULT_DT,
            force_limit: 5.0,
            noise_fraction: 0.01,
            initial: [0.0, 0.0],
            target: [0.3, 0.2],
            success_threshold: 0.01,
        }
    }
}

/// Planar point mass with viscous drag, `m v̇ = f − c v`, integrated
/// semi-implicitly.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub cfg: PointMassConfig,
}

impl PointMassEnv {
    pub fn new(cfg: PointMassConfig) -> Result<Self> {
        check_positive("mass", cfg.mass)?;
        check_nonnegative("drag", cfg.drag)?;
        check_positive("dt", cfg.dt)?;
        check_positive("force_limit", cfg.force_limit)?;
        check_nonnegative("noise_fraction", cfg.noise_fraction)?;
        check_positive("success_threshold", cfg.success_threshold)?;
        Ok(Self { cfg })
    }

    /// The exact one-step map as a linear model with zero noise.
    pub fn linear_dynamics(&self) -> LinearGaussianDynamics {
        let (m, c, h) = (self.cfg.mass, self.cfg.drag, self.cfg.dt);
        let a = 1.0 - h * c / m;
        let mut fx = DMatrix::zeros(4, 4);
        let mut fu = DMatrix::zeros(4, 2);
        for i in 0..2 {
            fx[(2 + i, 2 + i)] = a;
            fx[(i, i)] = 1.0;
            fx[(i, 2 + i)] = h * a;
            fu[(2 + i, i)] = h / m;
            fu[(i, i)] = h * h / m;
        }
        LinearGaussianDynamics { fx, fu, fc: DVector::zeros(4), noise_cov: DMatrix::zeros(4, 4) }
    }
}

impl Environment for PointMassEnv {
    fn id(&self) -> &'static str {
        "point_mass"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn action_limit(&self) -> f64 {
        self.cfg.force_limit
    }

    fn noise_std(&self) -> f64 {
        self.cfg.noise_fraction * self.cfg.force_limit
    }

    fn geometry(&self) -> Geometry {
        Geometry::PointMass
    }

    fn target(&self) -> Vector2<f64> {
        Vector2::new(self.cfg.target[0], self.cfg.target[1])
    }

    fn success_threshold(&self) -> f64 {
        self.cfg.success_threshold
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.cfg.initial[0], self.cfg.initial[1], 0.0, 0.0])
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (m, c, h) = (self.cfg.mass, self.cfg.drag, self.cfg.dt);
        let mut out = x.clone();
        for i in 0..2 {
            let v = x[2 + i] + h * (u[i] - c * x[2 + i]) / m;
            out[2 + i] = v;
            out[i] = x[i] + h * v;
        }
        out
    }
}
