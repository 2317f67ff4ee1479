use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

/// Maps a `[q; v]` state to a planar end-effector point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    /// The first two state entries are the point itself.
    PointMass,
    /// Planar two-link arm with joint angles in the first two entries.
    TwoLink { l1: f64, l2: f64 },
}

/// Squared distance `s(x)` with gradient and Hessian in the state.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredDistance {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl Geometry {
    pub fn end_effector(&self, x: &DVector<f64>) -> Vector2<f64> {
        match *self {
            Geometry::PointMass => Vector2::new(x[0], x[1]),
            Geometry::TwoLink { l1, l2 } => {
                let (a, b) = (x[0], x[0] + x[1]);
                Vector2::new(l1 * a.cos() + l2 * b.cos(), l1 * a.sin() + l2 * b.sin())
            }
        }
    }

    /// `∂p/∂q`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Matrix2<f64> {
        match *self {
            Geometry::PointMass => Matrix2::identity(),
            Geometry::TwoLink { l1, l2 } => {
                let (a, b) = (x[0], x[0] + x[1]);
                Matrix2::new(
                    -l1 * a.sin() - l2 * b.sin(),
                    -l2 * b.sin(),
                    l1 * a.cos() + l2 * b.cos(),
                    l2 * b.cos(),
                )
            }
        }
    }

    /// `∂²p_k/∂q²` for each coordinate `k`.
    pub fn hessians(&self, x: &DVector<f64>) -> [Matrix2<f64>; 2] {
        match *self {
            Geometry::PointMass => [Matrix2::zeros(), Matrix2::zeros()],
            Geometry::TwoLink { l1, l2 } => {
                let (a, b) = (x[0], x[0] + x[1]);
                let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
                let hx = Matrix2::new(-l1 * ca - l2 * cb, -l2 * cb, -l2 * cb, -l2 * cb);
                let hy = Matrix2::new(-l1 * sa - l2 * sb, -l2 * sb, -l2 * sb, -l2 * sb);
                [hx, hy]
            }
        }
    }

    pub fn end_effector_velocity(&self, x: &DVector<f64>) -> Vector2<f64> {
        self.jacobian(x) * Vector2::new(x[2], x[3])
    }

    pub fn distance(&self, x: &DVector<f64>, target: &Vector2<f64>) -> f64 {
        (self.end_effector(x) - target).norm()
    }

    /// `s = ‖p(q) − target‖²` with derivatives chained through the kinematics.
    pub fn squared_distance(&self, x: &DVector<f64>, target: &Vector2<f64>) -> SquaredDistance {
        let n = x.len();
        let e = self.end_effector(x) - target;
        let j = self.jacobian(x);
        let g = j.transpose() * e * 2.0;
        let hs = self.hessians(x);
        let h = (j.transpose() * j + hs[0] * e[0] + hs[1] * e[1]) * 2.0;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..2 {
            grad[i] = g[i];
            for k in 0..2 {
                hess[(i, k)] = h[(i, k)];
            }
        }
        SquaredDistance { value: e.norm_squared(), grad, hess }
    }

    /// Inverse kinematics for the two-link arm (elbow-down branch when `elbow_up` is false).
    pub fn inverse_kinematics(&self, p: &Vector2<f64>, elbow_up: bool) -> Option<(f64, f64)> {
        match *self {
            Geometry::PointMass => Some((p[0], p[1])),
            Geometry::TwoLink { l1, l2 } => {
                let c2 = (p.norm_squared() - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
                if !(-1.0..=1.0).contains(&c2) {
                    return None;
                }
                let s2 = (1.0 - c2 * c2).sqrt() * if elbow_up { 1.0 } else { -1.0 };
                let q2 = s2.atan2(c2);
                let q1 = p[1].atan2(p[0]) - (l2 * s2).atan2(l1 + l2 * c2);
                Some((q1, q2))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_arm_points_along_x() {
        let g = Geometry::TwoLink { l1: 0.5, l2: 0.4 };
        let p = g.end_effector(&DVector::zeros(4));
        assert!((p - Vector2::new(0.9, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn inverse_kinematics_roundtrip() {
        let g = Geometry::TwoLink { l1: 0.5, l2: 0.5 };
        for (x, y) in [(0.4, -0.3), (0.55, -0.57), (-0.2, 0.7)] {
            for up in [false, true] {
                let (a, b) = g.inverse_kinematics(&Vector2::new(x, y), up).unwrap();
                let p = g.end_effector(&DVector::from_vec(vec![a, b, 0.0, 0.0]));
                assert!((p - Vector2::new(x, y)).norm() < 1e-12);
            }
        }
        assert!(g.inverse_kinematics(&Vector2::new(2.0, 0.0), false).is_none());
    }
}
