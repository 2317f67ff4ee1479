//! Discounted iterative LQR: cost expansion, backward recursion, line-searched
//! forward pass and Levenberg-style regularization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::LinearGaussianDynamics;
use crate::linalg;

pub const DEFAULT_GAMMA: f64 = 0.95;
/// Eigenvalue floor applied to the action block of every cost Hessian.
pub const UU_FLOOR: f64 = 1e-6;

/// Second-order expansion of the stage cost around a nominal `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCostExpansion {
    /// Hessian with respect to `[x; u]`.
    pub l_zz: DMatrix<f64>,
    /// Gradient with respect to `[x; u]`.
    pub l_z: DVector<f64>,
    pub value: f64,
}

/// Discrete-time dynamics used for planning.
pub trait DynamicsModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// Analytic `(f_x, f_u)` if available; otherwise finite differences are used.
    fn linearize(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// Stage cost `ℓ_t(x, u)`.
pub trait CostModel {
    fn cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    /// Analytic expansion if available; otherwise finite differences are used.
    fn expansion(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<QuadraticCostExpansion> {
        None
    }
}

impl DynamicsModel for LinearGaussianDynamics {
    fn state_dim(&self) -> usize {
        self.fx.nrows()
    }

    fn action_dim(&self) -> usize {
        self.fu.ncols()
    }

    fn step(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.predict(x, u))
    }

    fn linearize(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.fx.clone(), self.fu.clone()))
    }
}

/// A different linear model at each step.
#[derive(Debug, Clone)]
pub struct TimeVaryingLinearModel(pub Vec<LinearGaussianDynamics>);

impl DynamicsModel for TimeVaryingLinearModel {
    fn state_dim(&self) -> usize {
        self.0[0].state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0[0].action_dim()
    }

    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.0[t.min(self.0.len() - 1)].predict(x, u))
    }

    fn linearize(&self, t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let d = &self.0[t.min(self.0.len() - 1)];
        Some((d.fx.clone(), d.fu.clone()))
    }
}

/// Central-difference Jacobians with a step scaled by the coordinate magnitude.
pub fn finite_difference_jacobians<M: DynamicsModel + ?Sized>(
    model: &M,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (dx, du) = (x.len(), u.len());
    let mut fx = DMatrix::zeros(dx, dx);
    let mut fu = DMatrix::zeros(dx, du);
    for i in 0..dx {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (model.step(t, &xp, u)? - model.step(t, &xm, u)?) / (2.0 * h);
        fx.set_column(i, &col);
    }
    for i in 0..du {
        let h = 1e-5 * u[i].abs().max(1.0);
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += h;
        um[i] -= h;
        let col = (model.step(t, x, &up)? - model.step(t, x, &um)?) / (2.0 * h);
        fu.set_column(i, &col);
    }
    Ok((fx, fu))
}

fn fd_cost_expansion<C: CostModel + ?Sized>(cost: &C, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> QuadraticCostExpansion {
    let dx = x.len();
    let z = linalg::stack(&[x, u]);
    let n = z.len();
    let f = |z: &DVector<f64>| cost.cost(t, &z.rows(0, dx).into_owned(), &z.rows(dx, n - dx).into_owned());
    let steps: Vec<f64> = z.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let f0 = f(&z);
    for i in 0..n {
        let hi = steps[i];
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += hi;
        zm[i] -= hi;
        let (fp, fm) = (f(&zp), f(&zm));
        grad[i] = (fp - fm) / (2.0 * hi);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let eval = |si: f64, sj: f64| {
                let mut w = z.clone();
                w[i] += si * hi;
                w[j] += sj * hj;
                f(&w)
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    QuadraticCostExpansion { l_zz: hess, l_z: grad, value: f0 }
}

/// Quadratic expansions along a trajectory, with the action block eigenvalue-floored.
pub fn expand_cost<C: CostModel + ?Sized>(
    cost: &C,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> Result<Vec<QuadraticCostExpansion>> {
    let mut out = Vec::with_capacity(controls.len());
    for (t, (x, u)) in states.iter().zip(controls).enumerate() {
        let mut e = cost.expansion(t, x, u).unwrap_or_else(|| fd_cost_expansion(cost, t, x, u));
        if !linalg::all_finite_mat(&e.l_zz) || !linalg::all_finite_vec(&e.l_z) || !e.value.is_finite() {
            return Err(Error::Expansion { step: t });
        }
        let (dx, du) = (x.len(), u.len());
        let uu = e.l_zz.view((dx, dx), (du, du)).into_owned();
        let uu = linalg::floor_eigenvalues(&uu, UU_FLOOR);
        e.l_zz.view_mut((dx, dx), (du, du)).copy_from(&uu);
        e.l_zz = linalg::symmetrize(&e.l_zz);
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    #[serde(with = "linalg::serde_vector")]
    pub x_hat: DVector<f64>,
    #[serde(with = "linalg::serde_vector")]
    pub u_hat: DVector<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub gain: DMatrix<f64>,
    #[serde(with = "linalg::serde_vector")]
    pub offset: DVector<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub quu: DMatrix<f64>,
}

/// Per-step affine feedback law `u = û + k + K(x − x̂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeVaryingLinearPolicy {
    pub steps: Vec<PolicyStep>,
}

impl TimeVaryingLinearPolicy {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn action(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        self.action_scaled(t, x, 1.0)
    }

    /// `û + αk + K(x − x̂)`.
    pub fn action_scaled(&self, t: usize, x: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let s = &self.steps[t];
        &s.u_hat + &s.offset * alpha + &s.gain * (x - &s.x_hat)
    }

    /// Drops the first step and repeats the last one.
    pub fn shifted(&self) -> Self {
        let mut steps: Vec<PolicyStep> = self.steps.iter().skip(1).cloned().collect();
        if let Some(last) = self.steps.last() {
            steps.push(last.clone());
        }
        Self { steps }
    }

    pub fn check_invariants(&self) -> bool {
        self.steps.iter().all(|s| {
            linalg::all_finite_mat(&s.gain)
                && linalg::all_finite_vec(&s.offset)
                && s.quu.clone().cholesky().is_some()
        })
    }
}

/// Output of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub quu: Vec<DMatrix<f64>>,
    pub value_hessians: Vec<DMatrix<f64>>,
    /// Expected cost change is `α·expected_linear + α²·expected_quadratic`.
    pub expected_linear: f64,
    pub expected_quadratic: f64,
}

impl LqrSolution {
    pub fn into_policy(self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> TimeVaryingLinearPolicy {
        let steps = self
            .gains
            .into_iter()
            .zip(self.offsets)
            .zip(self.quu)
            .enumerate()
            .map(|(t, ((gain, offset), quu))| PolicyStep {
                x_hat: states[t].clone(),
                u_hat: controls[t].clone(),
                gain,
                offset,
                quu,
            })
            .collect();
        TimeVaryingLinearPolicy { steps }
    }
}

/// Backward recursion with discount `gamma` and additive `mu·I` on `Q_uu`.
/// Only `f_x` and `f_u` enter; the value after the last step is zero.
pub fn lqr_backward(
    dynamics: &[LinearGaussianDynamics],
    cost: &[QuadraticCostExpansion],
    gamma: f64,
    mu: f64,
) -> Result<LqrSolution> {
    let jac: Vec<(DMatrix<f64>, DMatrix<f64>)> = dynamics.iter().map(|d| (d.fx.clone(), d.fu.clone())).collect();
    backward_pass(&jac, cost, gamma, mu)
}

fn backward_pass(
    jac: &[(DMatrix<f64>, DMatrix<f64>)],
    cost: &[QuadraticCostExpansion],
    gamma: f64,
    mu: f64,
) -> Result<LqrSolution> {
    let t_len = cost.len();
    if t_len == 0 || jac.len() != t_len {
        return Err(Error::InvalidInput(format!(
            "dynamics ({}) and cost ({}) sequences must be equal and non-empty",
            jac.len(),
            t_len
        )));
    }
    let dx = jac[0].0.nrows();
    let du = jac[0].1.ncols();
    let mut vxx = DMatrix::<f64>::zeros(dx, dx);
    let mut vx = DVector::<f64>::zeros(dx);
    let mut gains = vec![DMatrix::zeros(du, dx); t_len];
    let mut offsets = vec![DVector::zeros(du); t_len];
    let mut quus = vec![DMatrix::zeros(du, du); t_len];
    let mut vhess = vec![DMatrix::zeros(dx, dx); t_len];
    let (mut lin, mut quad) = (0.0, 0.0);
    for t in (0..t_len).rev() {
        let (fx, fu) = &jac[t];
        let mut f = DMatrix::zeros(dx, dx + du);
        f.columns_mut(0, dx).copy_from(fx);
        f.columns_mut(dx, du).copy_from(fu);
        let qzz = &cost[t].l_zz + f.transpose() * &vxx * &f * gamma;
        let qz = &cost[t].l_z + f.transpose() * &vx * gamma;
        let qxx = qzz.view((0, 0), (dx, dx)).into_owned();
        let qux = qzz.view((dx, 0), (du, dx)).into_owned();
        let quu = linalg::symmetrize(&qzz.view((dx, dx), (du, du)).into_owned()) + DMatrix::identity(du, du) * mu;
        let qx = qz.rows(0, dx).into_owned();
        let qu = qz.rows(dx, du).into_owned();
        let chol = quu.clone().cholesky().ok_or(Error::BackwardPass { step: t })?;
        let k_gain = -chol.solve(&qux);
        let k_off = -chol.solve(&qu);
        if !linalg::all_finite_mat(&k_gain) || !linalg::all_finite_vec(&k_off) {
            return Err(Error::BackwardPass { step: t });
        }
        vxx = linalg::symmetrize(&(&qxx + qux.transpose() * &k_gain));
        vx = &qx + qux.transpose() * &k_off;
        lin = k_off.dot(&qu) + gamma * lin;
        quad = 0.5 * k_off.dot(&(&quu * &k_off)) + gamma * quad;
        gains[t] = k_gain;
        offsets[t] = k_off;
        quus[t] = quu;
        vhess[t] = vxx.clone();
    }
    Ok(LqrSolution {
        gains,
        offsets,
        quu: quus,
        value_hessians: vhess,
        expected_linear: lin,
        expected_quadratic: quad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlqrOptions {
    pub max_iters: usize,
    pub tol_rel: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_factor: f64,
    pub line_search: Vec<f64>,
    /// Per-iteration JSON-lines trace destination.
    pub trace: Option<PathBuf>,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol_rel: 1e-6,
            mu_init: 0.0,
            mu_min: 1e-6,
            mu_max: 1e6,
            mu_factor: 10.0,
            line_search: (0..7).map(|i| 0.5f64.powi(i)).collect(),
            trace: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum InitialGuess {
    /// Open-loop control sequence.
    Controls(Vec<DVector<f64>>),
    /// Closed-loop rollout `û + K(x − x̂)` of an earlier policy.
    Policy(TimeVaryingLinearPolicy),
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// `states[t]` is the state at which `controls[t]` is applied; one extra final state.
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct IlqrResult {
    pub policy: TimeVaryingLinearPolicy,
    pub total_cost: f64,
    pub initial_cost: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    /// Cost after the initial rollout and after each accepted step.
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub stalled: bool,
    pub final_mu: f64,
    pub nominal: Rollout,
}

#[derive(Serialize)]
struct TraceLine {
    iter: usize,
    cost: f64,
    mu: f64,
    alpha: Option<f64>,
}

/// Discounted cost `Σ γ^t ℓ_t` of an open-loop rollout.
pub fn rollout_controls<M: DynamicsModel + ?Sized, C: CostModel + ?Sized>(
    model: &M,
    cost: &C,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    gamma: f64,
) -> Result<Rollout> {
    let mut states = vec![x0.clone()];
    let mut total = 0.0;
    let mut disc = 1.0;
    for (t, u) in controls.iter().enumerate() {
        let x = &states[t];
        total += disc * cost.cost(t, x, u);
        disc *= gamma;
        let next = model.step(t, x, u)?;
        states.push(next);
    }
    Ok(Rollout { states, controls: controls.to_vec(), cost: total })
}

/// Closed-loop rollout of `û + αk + K(x − x̂)`.
pub fn rollout_policy<M: DynamicsModel + ?Sized, C: CostModel + ?Sized>(
    model: &M,
    cost: &C,
    x0: &DVector<f64>,
    policy: &TimeVaryingLinearPolicy,
    alpha: f64,
    gamma: f64,
) -> Result<Rollout> {
    let mut states = vec![x0.clone()];
    let mut controls = Vec::with_capacity(policy.horizon());
    let mut total = 0.0;
    let mut disc = 1.0;
    for t in 0..policy.horizon() {
        let x = &states[t];
        let u = policy.action_scaled(t, x, alpha);
        total += disc * cost.cost(t, x, &u);
        disc *= gamma;
        if !total.is_finite() {
            break;
        }
        let next = model.step(t, x, &u)?;
        controls.push(u);
        states.push(next);
    }
    if controls.len() < policy.horizon() {
        total = f64::INFINITY;
    }
    Ok(Rollout { states, controls, cost: total })
}

fn linearize_along<M: DynamicsModel + ?Sized>(model: &M, r: &Rollout) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    r.controls
        .iter()
        .enumerate()
        .map(|(t, u)| match model.linearize(t, &r.states[t], u) {
            Some(j) => Ok(j),
            None => finite_difference_jacobians(model, t, &r.states[t], u),
        })
        .collect()
}

fn increase_mu(mu: f64, opts: &IlqrOptions) -> f64 {
    (mu * opts.mu_factor).max(opts.mu_min)
}

fn decrease_mu(mu: f64, opts: &IlqrOptions) -> f64 {
    let m = mu / opts.mu_factor;
    if m < opts.mu_min {
        0.0
    } else {
        m
    }
}

/// Iterative LQR from `x0`. The returned policy is expanded around the final
/// nominal trajectory, whose cost is never worse than the initial rollout.
pub fn ilqr_solve<M: DynamicsModel + ?Sized, C: CostModel + ?Sized>(
    model: &M,
    cost: &C,
    x0: &DVector<f64>,
    init: InitialGuess,
    gamma: f64,
    opts: &IlqrOptions,
) -> Result<IlqrResult> {
    let mut nominal = match &init {
        InitialGuess::Controls(us) => {
            if us.is_empty() {
                return Err(Error::InvalidInput("horizon must be at least one step".into()));
            }
            rollout_controls(model, cost, x0, us, gamma)?
        }
        InitialGuess::Policy(p) => {
            if p.horizon() == 0 {
                return Err(Error::InvalidInput("horizon must be at least one step".into()));
            }
            rollout_policy(model, cost, x0, p, 0.0, gamma)?
        }
    };
    if !nominal.cost.is_finite() {
        return Err(Error::InvalidInput("initial rollout has non-finite cost".into()));
    }
    let mut trace = match &opts.trace {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut emit = |line: TraceLine| -> Result<()> {
        if let Some(w) = trace.as_mut() {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };

    let initial_cost = nominal.cost;
    let mut history = vec![initial_cost];
    let mut mu = opts.mu_init;
    let mut accepted = 0usize;
    let (mut converged, mut stalled) = (false, false);
    let mut current: Option<(LqrSolution, Vec<QuadraticCostExpansion>)> = None;
    emit(TraceLine { iter: 0, cost: nominal.cost, mu, alpha: None })?;

    for iter in 0..opts.max_iters {
        let expansions = expand_cost(cost, &nominal.states, &nominal.controls)?;
        let jac = linearize_along(model, &nominal)?;
        let solution = loop {
            match backward_pass(&jac, &expansions, gamma, mu) {
                Ok(s) => break Some(s),
                Err(Error::BackwardPass { .. }) => {
                    mu = increase_mu(mu, opts);
                    if mu > opts.mu_max {
                        break None;
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let Some(solution) = solution else {
            stalled = true;
            break;
        };
        let expected = -(solution.expected_linear + solution.expected_quadratic);
        let threshold = opts.tol_rel * nominal.cost.abs();
        current = Some((solution, expansions));
        if expected <= threshold {
            converged = true;
            break;
        }
        let (sol, _) = current.as_ref().unwrap();
        let policy = sol.clone().into_policy(&nominal.states, &nominal.controls);
        let mut step = None;
        for &alpha in &opts.line_search {
            let cand = rollout_policy(model, cost, x0, &policy, alpha, gamma)?;
            if cand.cost < nominal.cost {
                step = Some((alpha, cand));
                break;
            }
        }
        match step {
            Some((alpha, cand)) => {
                let improvement = nominal.cost - cand.cost;
                nominal = cand;
                current = None;
                accepted += 1;
                history.push(nominal.cost);
                mu = decrease_mu(mu, opts);
                emit(TraceLine { iter: iter + 1, cost: nominal.cost, mu, alpha: Some(alpha) })?;
                if improvement <= opts.tol_rel * nominal.cost.abs() {
                    converged = true;
                    break;
                }
            }
            None => {
                mu = increase_mu(mu, opts);
                emit(TraceLine { iter: iter + 1, cost: nominal.cost, mu, alpha: None })?;
                if mu > opts.mu_max {
                    stalled = true;
                    break;
                }
            }
        }
    }

    // Policy around the final nominal trajectory.
    let policy = match current {
        Some((sol, _)) => sol.into_policy(&nominal.states, &nominal.controls),
        None => final_policy(model, cost, &nominal, gamma, &mut mu, opts)?,
    };
    Ok(IlqrResult {
        policy,
        total_cost: nominal.cost,
        initial_cost,
        iterations: accepted,
        cost_history: history,
        converged,
        stalled,
        final_mu: mu,
        nominal,
    })
}

fn final_policy<M: DynamicsModel + ?Sized, C: CostModel + ?Sized>(
    model: &M,
    cost: &C,
    nominal: &Rollout,
    gamma: f64,
    mu: &mut f64,
    opts: &IlqrOptions,
) -> Result<TimeVaryingLinearPolicy> {
    let expansions = expand_cost(cost, &nominal.states, &nominal.controls)?;
    let jac = linearize_along(model, nominal)?;
    loop {
        match backward_pass(&jac, &expansions, gamma, *mu) {
            Ok(s) => return Ok(s.into_policy(&nominal.states, &nominal.controls)),
            Err(Error::BackwardPass { .. }) if *mu <= opts.mu_max => *mu = increase_mu(*mu, opts),
            Err(Error::BackwardPass { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    // Open-loop fallback: follow the nominal with no feedback.
    let dx = model.state_dim();
    let steps = expansions
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let du = nominal.controls[t].len();
            let uu = e.l_zz.view((dx, dx), (du, du)).into_owned() + DMatrix::identity(du, du) * opts.mu_max;
            PolicyStep {
                x_hat: nominal.states[t].clone(),
                u_hat: nominal.controls[t].clone(),
                gain: DMatrix::zeros(du, dx),
                offset: DVector::zeros(du),
                quu: uu,
            }
        })
        .collect();
    Ok(TimeVaryingLinearPolicy { steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    }

    impl CostModel for Quadratic {
        fn cost(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            0.5 * x.dot(&(&self.q * x)) + 0.5 * u.dot(&(&self.r * u))
        }
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn single_step_gain_is_cost_only() {
        let mut l_zz = DMatrix::zeros(2, 2);
        l_zz[(0, 0)] = 3.0;
        l_zz[(1, 1)] = 2.0;
        l_zz[(0, 1)] = 0.5;
        l_zz[(1, 0)] = 0.5;
        let e = QuadraticCostExpansion { l_zz, l_z: DVector::from_vec(vec![1.0, -4.0]), value: 0.0 };
        let d = LinearGaussianDynamics { fx: scalar(7.0), fu: scalar(3.0), fc: DVector::zeros(1), noise_cov: scalar(0.0) };
        let s = lqr_backward(&[d], &[e], 0.95, 0.0).unwrap();
        assert!((s.gains[0][(0, 0)] + 0.25).abs() < 1e-15);
        assert!((s.offsets[0][0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn indefinite_quu_reports_step() {
        let mut l_zz = DMatrix::zeros(2, 2);
        l_zz[(1, 1)] = -1.0;
        let e = QuadraticCostExpansion { l_zz, l_z: DVector::zeros(2), value: 0.0 };
        let d = LinearGaussianDynamics { fx: scalar(1.0), fu: scalar(1.0), fc: DVector::zeros(1), noise_cov: scalar(0.0) };
        let err = lqr_backward(&[d.clone(), d], &[e.clone(), e], 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::BackwardPass { step: 1 }));
    }

    #[test]
    fn fd_expansion_of_quadratic_is_exact() {
        let c = Quadratic { q: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), r: scalar(0.4) };
        let x = DVector::from_vec(vec![0.7, -1.2]);
        let u = DVector::from_vec(vec![0.3]);
        let e = &expand_cost(&c, &[x.clone()], &[u.clone()]).unwrap()[0];
        let mut h = DMatrix::zeros(3, 3);
        h.view_mut((0, 0), (2, 2)).copy_from(&c.q);
        h[(2, 2)] = 0.4;
        assert!((&e.l_zz - &h).norm() < 1e-6);
        let g = linalg::stack(&[&(&c.q * &x), &(&c.r * &u)]);
        assert!((&e.l_z - g).norm() < 1e-8);
    }

    #[test]
    fn uu_block_is_floored() {
        let c = Quadratic { q: scalar(1.0), r: scalar(0.0) };
        let e = &expand_cost(&c, &[DVector::zeros(1)], &[DVector::zeros(1)]).unwrap()[0];
        assert!(e.l_zz[(1, 1)] >= UU_FLOOR - 1e-12);
    }

    #[test]
    fn empty_horizon_rejected() {
        let d = LinearGaussianDynamics { fx: scalar(1.0), fu: scalar(1.0), fc: DVector::zeros(1), noise_cov: scalar(0.0) };
        let c = Quadratic { q: scalar(1.0), r: scalar(1.0) };
        let r = ilqr_solve(&d, &c, &DVector::zeros(1), InitialGuess::Controls(vec![]), 1.0, &IlqrOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn trace_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let d = LinearGaussianDynamics { fx: scalar(1.0), fu: scalar(1.0), fc: DVector::zeros(1), noise_cov: scalar(0.0) };
        let c = Quadratic { q: scalar(1.0), r: scalar(1.0) };
        let opts = IlqrOptions { trace: Some(path.clone()), ..Default::default() };
        ilqr_solve(&d, &c, &DVector::from_element(1, 1.0), InitialGuess::Controls(vec![DVector::zeros(1); 5]), 1.0, &opts)
            .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.lines().count() >= 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("cost").is_some() && first.get("mu").is_some());
    }
}
