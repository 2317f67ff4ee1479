use nalgebra::{DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::arm::{ArmConfig, ArmEnv};
use super::{check_nonnegative, check_positive, Environment, Geometry};
use crate::error::{Error, Result};

/// A horizontal surface at `surface_y` with a vertical slot centred on `slot_x`.
/// Solid material lies below the surface everywhere except inside the slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotSurface {
    pub surface_y: f64,
    pub slot_x: f64,
    pub slot_width: f64,
    pub slot_depth: f64,
}

impl Default for SlotSurface {
    fn default() -> Self {
        Self { surface_y: -0.5, slot_x: 0.55, slot_width: 0.02, slot_depth: 0.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactConfig {
    /// Normal spring stiffness (N/m).
    pub stiffness: f64,
    /// Normal damping (N·s/m).
    pub damping: f64,
    pub friction: f64,
    /// Tangential speed at which friction reaches ~76% of its Coulomb bound.
    pub slip_velocity: f64,
    /// Length scale of the soft minimum over faces near corners.
    pub smoothing: f64,
    /// Penetration over which damping ramps in, keeping the force continuous at first touch.
    pub damping_ramp: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self {
            stiffness: 1e4,
            damping: 100.0,
            friction: 0.3,
            slip_velocity: 0.02,
            smoothing: 5e-4,
            damping_ramp: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertionConfig {
    pub arm: ArmConfig,
    pub surface: SlotSurface,
    pub contact: ContactConfig,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            arm: ArmConfig { substeps: 100, initial: [0.41, -2.0], target: [0.55, -0.57], ..Default::default() },
            surface: SlotSurface::default(),
            contact: ContactConfig::default(),
        }
    }
}

impl InsertionConfig {
    pub fn high_friction() -> Self {
        let mut c = Self::default();
        c.contact.friction = 1.5;
        c
    }
}

/// Half-plane `{p : c − a·p > 0}` with outward normal `a`.
#[derive(Debug, Clone, Copy)]
struct Face {
    a: Vector2<f64>,
    c: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContactForce {
    pub normal: Vector2<f64>,
    pub friction: Vector2<f64>,
    /// Largest smoothed penetration over all solid pieces.
    pub penetration: f64,
}

impl ContactForce {
    pub fn total(&self) -> Vector2<f64> {
        self.normal + self.friction
    }
}

#[derive(Debug, Clone)]
pub struct InsertionEnv {
    pub cfg: InsertionConfig,
    arm: ArmEnv,
    pieces: Vec<Vec<Face>>,
}

impl InsertionEnv {
    pub fn new(cfg: InsertionConfig) -> Result<Self> {
        let arm = ArmEnv::new(cfg.arm.clone())?;
        let (s, k) = (&cfg.surface, &cfg.contact);
        check_positive("slot_width", s.slot_width)?;
        check_positive("slot_depth", s.slot_depth)?;
        check_positive("stiffness", k.stiffness)?;
        check_nonnegative("damping", k.damping)?;
        check_nonnegative("friction", k.friction)?;
        check_positive("slip_velocity", k.slip_velocity)?;
        check_positive("smoothing", k.smoothing)?;
        check_positive("damping_ramp", k.damping_ramp)?;
        if !s.surface_y.is_finite() || !s.slot_x.is_finite() {
            return Err(Error::Config("surface position must be finite".into()));
        }
        let top = Face { a: Vector2::new(0.0, 1.0), c: s.surface_y };
        let left_wall = s.slot_x - s.slot_width / 2.0;
        let right_wall = s.slot_x + s.slot_width / 2.0;
        let pieces = vec![
            vec![top, Face { a: Vector2::new(1.0, 0.0), c: left_wall }],
            vec![top, Face { a: Vector2::new(-1.0, 0.0), c: -right_wall }],
            vec![Face { a: Vector2::new(0.0, 1.0), c: s.surface_y - s.slot_depth }],
        ];
        Ok(Self { cfg, arm, pieces })
    }

    pub fn arm(&self) -> &ArmEnv {
        &self.arm
    }

    /// Smoothed penetration depth of `p` into one solid piece and its outward
    /// direction.
    fn piece_depth(&self, faces: &[Face], p: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        let s = self.cfg.contact.smoothing;
        let depths: Vec<f64> = faces.iter().map(|f| f.c - f.a.dot(p)).collect();
        let m = depths.iter().cloned().fold(f64::INFINITY, f64::min);
        if m <= 0.0 {
            return None;
        }
        let weights: Vec<f64> = depths.iter().map(|d| (-(d - m) / s).exp()).collect();
        let total: f64 = weights.iter().sum();
        let depth = m - s * total.ln();
        if depth <= 0.0 {
            return None;
        }
        let outward = faces.iter().zip(&weights).fold(Vector2::zeros(), |acc, (f, w)| acc + f.a * (w / total));
        Some((depth, outward))
    }

    /// Contact force on the end effector at position `p` moving with velocity `v`.
    pub fn contact_force(&self, p: &Vector2<f64>, v: &Vector2<f64>) -> ContactForce {
        let k = &self.cfg.contact;
        let mut out = ContactForce::default();
        for faces in &self.pieces {
            let Some((depth, outward)) = self.piece_depth(faces, p) else {
                continue;
            };
            out.penetration = out.penetration.max(depth);
            let rate = -outward.dot(v);
            let ramp = (depth / k.damping_ramp).min(1.0);
            let fn_mag = (k.stiffness * depth + k.damping * rate * ramp).max(0.0);
            out.normal += outward * fn_mag;
            let len = outward.norm();
            if len > 0.0 && k.friction > 0.0 {
                let n = outward / len;
                let t = Vector2::new(-n[1], n[0]);
                let vt = v.dot(&t);
                out.friction -= t * (k.friction * fn_mag * (vt / k.slip_velocity).tanh());
            }
        }
        out
    }

    /// Contact force at the end effector of state `x`.
    pub fn contact_at(&self, x: &DVector<f64>) -> ContactForce {
        let g = self.arm.geometry();
        self.contact_force(&g.end_effector(x), &g.end_effector_velocity(x))
    }

    fn contact_torque(&self, s: &Vector4<f64>) -> Vector2<f64> {
        let x = DVector::from_column_slice(s.as_slice());
        let g = self.arm.geometry();
        let f = self.contact_force(&g.end_effector(&x), &g.end_effector_velocity(&x)).total();
        g.jacobian(&x).transpose() * f
    }

    pub fn is_in_solid(&self, p: &Vector2<f64>) -> bool {
        self.pieces.iter().any(|faces| faces.iter().all(|f| f.c - f.a.dot(p) > 0.0))
    }
}

impl Environment for InsertionEnv {
    fn id(&self) -> &'static str {
        "insertion"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.cfg.arm.dt
    }

    fn action_limit(&self) -> f64 {
        self.cfg.arm.torque_limit
    }

    fn noise_std(&self) -> f64 {
        self.arm.noise_std()
    }

    fn geometry(&self) -> Geometry {
        self.arm.geometry()
    }

    fn target(&self) -> Vector2<f64> {
        self.arm.target()
    }

    fn success_threshold(&self) -> f64 {
        self.cfg.arm.success_threshold
    }

    fn initial_state(&self) -> DVector<f64> {
        self.arm.initial_state()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.arm.integrate(x, u, self.cfg.arm.substeps, |s| self.contact_torque(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env() -> InsertionEnv {
        InsertionEnv::new(InsertionConfig::default()).unwrap()
    }

    #[test]
    fn no_force_above_surface() {
        let e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let p = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5 + 1e-9..1.0));
            let v = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let f = e.contact_force(&p, &v);
            assert_eq!(f.total(), Vector2::zeros());
        }
        let slot = Vector2::new(0.55, -0.54);
        assert_eq!(e.contact_force(&slot, &Vector2::new(0.0, -1.0)).total(), Vector2::zeros());
    }

    #[test]
    fn penetration_pushes_out() {
        let e = env();
        let f = e.contact_force(&Vector2::new(0.3, -0.501), &Vector2::zeros());
        assert!((f.normal - Vector2::new(0.0, 10.0)).norm() < 1e-6);
        let wall = e.contact_force(&Vector2::new(0.5395, -0.53), &Vector2::zeros());
        assert!(wall.normal[0] > 0.0 && (wall.normal[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn static_press_penetration_matches_force_balance() {
        let e = env();
        let g = e.geometry();
        let (q1, q2) = g.inverse_kinematics(&Vector2::new(0.3, -0.5), false).unwrap();
        let mut x = DVector::from_vec(vec![q1, q2, 0.0, 0.0]);
        let push = Vector2::new(0.0, -8.0);
        for _ in 0..200 {
            let tau = g.jacobian(&x).transpose() * push;
            x = e.dynamics(&x, &DVector::from_vec(vec![tau[0], tau[1]]));
        }
        let pen = -0.5 - g.end_effector(&x)[1];
        let expected = 8.0 / e.cfg.contact.stiffness;
        assert!(((pen - expected) / expected).abs() < 0.05, "{pen} vs {expected}");
    }

    fn slide(env: &InsertionEnv) -> f64 {
        let g = env.geometry();
        let (q1, q2) = g.inverse_kinematics(&Vector2::new(0.3, -0.5008), false).unwrap();
        let mut x = DVector::from_vec(vec![q1, q2, 0.0, 0.0]);
        let push = Vector2::new(1.0, -8.0);
        let x0 = g.end_effector(&x)[0];
        for _ in 0..10 {
            let tau = g.jacobian(&x).transpose() * push;
            x = env.dynamics(&x, &DVector::from_vec(vec![tau[0], tau[1]]));
        }
        g.end_effector(&x)[0] - x0
    }

    #[test]
    fn high_friction_slides_less() {
        let low = slide(&env());
        let high = slide(&InsertionEnv::new(InsertionConfig::high_friction()).unwrap());
        assert!(low > 0.0 && high > 0.0);
        assert!(high < low, "{high} vs {low}");
    }

    #[test]
    fn contact_force_is_continuous() {
        let e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = e.cfg.contact.stiffness;
        let eps = 1e-7;
        for _ in 0..2000 {
            let p = Vector2::new(rng.random_range(0.53..0.57), rng.random_range(-0.585..-0.497));
            let dir = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let a = e.contact_force(&p, &Vector2::zeros());
            let b = e.contact_force(&(p + dir * eps), &Vector2::zeros());
            assert!((a.penetration - b.penetration).abs() <= eps * (1.0 + 1e-6));
            assert!((a.total() - b.total()).norm() <= 20.0 * k * eps);
        }
    }
}
