use nalgebra::{DVector, Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::{check_nonnegative, check_positive, Environment, Geometry, DEFAULT_DT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmConfig {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    /// Gravitational acceleration along −y; zero models a gravity-compensated arm.
    pub gravity: f64,
    /// Viscous joint damping (N·m·s/rad).
    pub damping: f64,
    pub torque_limit: f64,
    pub dt: f64,
    pub substeps: usize,
    pub noise_fraction: f64,
    /// Initial joint angles; the arm starts at rest.
    pub initial: [f64; 2],
    pub target: [f64; 2],
    pub success_threshold: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            l1: 0.5,
            l2: 0.5,
            m1: 1.0,
            m2: 1.0,
            gravity: 0.0,
            damping: 0.5,
            torque_limit: 3.0,
            dt: DEFAULT_DT,
            substeps: 10,
            noise_fraction: 0.01,
            initial: [0.3, 1.4],
            target: [0.15, 0.65],
            success_threshold: 0.02,
        }
    }
}

/// Planar two-link arm of uniform rods, `M(θ)θ̈ + C(θ,θ̇)θ̇ + g(θ) = τ − bθ̇`,
/// integrated with fixed-step RK4 substeps.
#[derive(Debug, Clone)]
pub struct ArmEnv {
    pub cfg: ArmConfig,
}

impl ArmEnv {
    pub fn new(cfg: ArmConfig) -> Result<Self> {
        for (name, v) in [("l1", cfg.l1), ("l2", cfg.l2), ("m1", cfg.m1), ("m2", cfg.m2), ("dt", cfg.dt)] {
            check_positive(name, v)?;
        }
        check_positive("torque_limit", cfg.torque_limit)?;
        check_positive("success_threshold", cfg.success_threshold)?;
        check_nonnegative("gravity", cfg.gravity)?;
        check_nonnegative("damping", cfg.damping)?;
        check_nonnegative("noise_fraction", cfg.noise_fraction)?;
        if cfg.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(Self { cfg })
    }

    fn inertia(&self) -> (f64, f64, f64, f64) {
        let c = &self.cfg;
        (c.l1 / 2.0, c.l2 / 2.0, c.m1 * c.l1 * c.l1 / 12.0, c.m2 * c.l2 * c.l2 / 12.0)
    }

    pub fn mass_matrix(&self, q2: f64) -> Matrix2<f64> {
        let c = &self.cfg;
        let (r1, r2, i1, i2) = self.inertia();
        let cos2 = q2.cos();
        let m11 = i1 + i2 + c.m1 * r1 * r1 + c.m2 * (c.l1 * c.l1 + r2 * r2 + 2.0 * c.l1 * r2 * cos2);
        let m12 = i2 + c.m2 * (r2 * r2 + c.l1 * r2 * cos2);
        let m22 = i2 + c.m2 * r2 * r2;
        Matrix2::new(m11, m12, m12, m22)
    }

    /// `C(θ,θ̇)θ̇`.
    pub fn coriolis(&self, q2: f64, qd: Vector2<f64>) -> Vector2<f64> {
        let (_, r2, _, _) = self.inertia();
        let h = self.cfg.m2 * self.cfg.l1 * r2 * q2.sin();
        Vector2::new(-h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]), h * qd[0] * qd[0])
    }

    pub fn gravity_torque(&self, q: Vector2<f64>) -> Vector2<f64> {
        let c = &self.cfg;
        let (r1, r2, _, _) = self.inertia();
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        Vector2::new(
            (c.m1 * r1 + c.m2 * c.l1) * c.gravity * c1 + c.m2 * r2 * c.gravity * c12,
            c.m2 * r2 * c.gravity * c12,
        )
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let c = &self.cfg;
        let (r1, r2, _, _) = self.inertia();
        let qd = Vector2::new(x[2], x[3]);
        let kinetic = 0.5 * qd.dot(&(self.mass_matrix(x[1]) * qd));
        let potential =
            c.gravity * ((c.m1 * r1 + c.m2 * c.l1) * x[0].sin() + c.m2 * r2 * (x[0] + x[1]).sin());
        kinetic + potential
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::TwoLink { l1: self.cfg.l1, l2: self.cfg.l2 }
    }

    /// Time derivative of the state under joint torque `tau` plus the torque
    /// returned by `external`.
    pub(super) fn derivative<F>(&self, s: &Vector4<f64>, tau: &Vector2<f64>, external: &F) -> Vector4<f64>
    where
        F: Fn(&Vector4<f64>) -> Vector2<f64>,
    {
        let q = Vector2::new(s[0], s[1]);
        let qd = Vector2::new(s[2], s[3]);
        let rhs = tau + external(s) - self.coriolis(s[1], qd) - self.gravity_torque(q) - qd * self.cfg.damping;
        let qdd = self.mass_matrix(s[1]).try_inverse().expect("mass matrix is positive definite") * rhs;
        Vector4::new(qd[0], qd[1], qdd[0], qdd[1])
    }

    pub(super) fn integrate<F>(&self, x: &DVector<f64>, u: &DVector<f64>, substeps: usize, external: F) -> DVector<f64>
    where
        F: Fn(&Vector4<f64>) -> Vector2<f64>,
    {
        let tau = Vector2::new(u[0], u[1]);
        let h = self.cfg.dt / substeps as f64;
        let mut s = Vector4::new(x[0], x[1], x[2], x[3]);
        for _ in 0..substeps {
            let k1 = self.derivative(&s, &tau, &external);
            let k2 = self.derivative(&(s + k1 * (h / 2.0)), &tau, &external);
            let k3 = self.derivative(&(s + k2 * (h / 2.0)), &tau, &external);
            let k4 = self.derivative(&(s + k3 * h), &tau, &external);
            s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        DVector::from_column_slice(s.as_slice())
    }
}

impl Environment for ArmEnv {
    fn id(&self) -> &'static str {
        "arm"
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
        self.cfg.torque_limit
    }

    fn noise_std(&self) -> f64 {
        self.cfg.noise_fraction * self.cfg.torque_limit
    }

    fn geometry(&self) -> Geometry {
        ArmEnv::geometry(self)
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
        self.integrate(x, u, self.cfg.substeps, |_| Vector2::zeros())
    }
}
