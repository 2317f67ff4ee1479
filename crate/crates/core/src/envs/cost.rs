use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::geometry::Geometry;
use crate::ilqr::{CostModel, QuadraticCostExpansion};

/// `w·d² + v·log(d² + α) + torque_weight·‖u‖²`, with `d` the end-effector
/// distance to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskCost {
    pub w: f64,
    pub v: f64,
    pub alpha: f64,
    pub torque_weight: f64,
    pub target: [f64; 2],
}

impl Default for TaskCost {
    fn default() -> Self {
        Self { w: 1.0, v: 0.01, alpha: 1e-5, torque_weight: 0.1, target: [0.0, 0.0] }
    }
}

impl TaskCost {
    pub fn with_target(mut self, target: Vector2<f64>) -> Self {
        self.target = [target[0], target[1]];
        self
    }

    pub fn target_vec(&self) -> Vector2<f64> {
        Vector2::new(self.target[0], self.target[1])
    }

    /// `v·log(α)`: the cost with zero distance and zero action.
    pub fn lower_bound(&self) -> f64 {
        self.v * self.alpha.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub value: f64,
    /// Gradient with respect to `[x; u]`.
    pub grad: DVector<f64>,
    /// Hessian with respect to `[x; u]`.
    pub hess: DMatrix<f64>,
}

pub fn eval_cost(cost: &TaskCost, geometry: &Geometry, x: &DVector<f64>, u: &DVector<f64>) -> CostEval {
    let (dx, du) = (x.len(), u.len());
    let sd = geometry.squared_distance(x, &cost.target_vec());
    let s = sd.value;
    let value = cost.w * s + cost.v * (s + cost.alpha).ln() + cost.torque_weight * u.norm_squared();
    let d1 = cost.w + cost.v / (s + cost.alpha);
    let d2 = -cost.v / ((s + cost.alpha) * (s + cost.alpha));
    let mut grad = DVector::zeros(dx + du);
    grad.rows_mut(0, dx).copy_from(&(&sd.grad * d1));
    grad.rows_mut(dx, du).copy_from(&(u * (2.0 * cost.torque_weight)));
    let mut hess = DMatrix::zeros(dx + du, dx + du);
    let hxx = &sd.hess * d1 + &sd.grad * sd.grad.transpose() * d2;
    hess.view_mut((0, 0), (dx, dx)).copy_from(&hxx);
    for i in 0..du {
        hess[(dx + i, dx + i)] = 2.0 * cost.torque_weight;
    }
    CostEval { value, grad, hess }
}

/// The task cost as a planner stage cost with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskCostModel {
    pub cost: TaskCost,
    pub geometry: Geometry,
}

impl CostModel for TaskCostModel {
    fn cost(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let s = self.geometry.squared_distance(x, &self.cost.target_vec()).value;
        self.cost.w * s + self.cost.v * (s + self.cost.alpha).ln() + self.cost.torque_weight * u.norm_squared()
    }

    fn expansion(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Option<QuadraticCostExpansion> {
        let e = eval_cost(&self.cost, &self.geometry, x, u);
        Some(QuadraticCostExpansion { l_zz: e.hess, l_z: e.grad, value: e.value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distance_value() {
        let c = TaskCost::default();
        let e = eval_cost(&c, &Geometry::PointMass, &DVector::zeros(4), &DVector::zeros(2));
        assert!((e.value - 0.01 * 1e-5f64.ln()).abs() < 1e-15);
        assert!((e.value + 0.11513).abs() < 1e-5);
        assert_eq!(e.value, c.lower_bound());
    }

    #[test]
    fn torque_term_adds_scaled_identity() {
        let c = TaskCost { torque_weight: 0.3, ..Default::default() };
        let e = eval_cost(&c, &Geometry::PointMass, &DVector::from_element(4, 0.2), &DVector::from_element(2, 1.0));
        assert!((e.hess[(4, 4)] - 0.6).abs() < 1e-15);
        assert!((e.hess[(5, 5)] - 0.6).abs() < 1e-15);
        assert_eq!(e.hess[(4, 5)], 0.0);
    }
}
