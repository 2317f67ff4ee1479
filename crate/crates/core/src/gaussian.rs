//! Joint Gaussians over stacked transitions `[x; u; x']`, normal-inverse-Wishart
//! fusion, and conditioning into local linear-Gaussian dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector};

/// Relative ridge added to the state-action block before it is inverted.
pub const CONDITIONING_RIDGE: f64 = 1e-6;
/// Absolute ridge floor so an all-zero block still yields finite gains.
pub const CONDITIONING_RIDGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGaussian {
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub cov: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{}, mean has {d} entries",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !linalg::all_finite_vec(&mean) || !linalg::all_finite_mat(&cov) {
            return Err(Error::InvalidInput("non-finite Gaussian parameters".into()));
        }
        Ok(Self { mean, cov: linalg::symmetrize(&cov) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks symmetry and positive semi-definiteness at the documented tolerances.
    pub fn check_invariants(&self) -> bool {
        let scale = self.cov.norm().max(1e-300);
        let asym = (&self.cov - self.cov.transpose()).norm() / scale;
        asym <= 1e-10 && linalg::min_eigenvalue(&self.cov) >= -1e-8 * scale
    }
}

/// Normal-inverse-Wishart prior parameters `(Φ, μ₀, m, n₀)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    #[serde(with = "serde_matrix")]
    pub phi: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub mu0: DVector<f64>,
    pub m: f64,
    pub n0: f64,
}

impl NiwParams {
    pub fn new(phi: DMatrix<f64>, mu0: DVector<f64>, m: f64, n0: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite() && n0 > 0.0 && n0.is_finite()) {
            return Err(Error::Domain(format!("prior strengths must be positive, got m={m}, n0={n0}")));
        }
        let g = JointGaussian::new(mu0, phi)?;
        Ok(Self { phi: g.cov, mu0: g.mean, m, n0 })
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// The Gaussian `N(μ₀, Φ/n₀)` used when judging how well the prior predicts.
    pub fn prior_gaussian(&self) -> JointGaussian {
        JointGaussian { mean: self.mu0.clone(), cov: &self.phi / self.n0 }
    }

    pub fn check_invariants(&self) -> bool {
        self.m > 0.0 && self.n0 > 0.0 && self.prior_gaussian().check_invariants()
    }
}

/// How the posterior mean weighs prior and empirical means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanRule {
    /// `(m μ₀ + n₀ μ̂) / (m + n₀)`.
    #[default]
    PriorCount,
    /// Conjugate posterior mean `(m μ₀ + N μ̂) / (m + N)`.
    Standard,
}

/// MAP estimate of a Gaussian under a normal-inverse-Wishart prior given
/// empirical moments from `n` (possibly fractional) effective samples.
pub fn niw_map_update(
    prior: &NiwParams,
    emp_mean: &DVector<f64>,
    emp_cov: &DMatrix<f64>,
    n: f64,
    rule: MeanRule,
) -> Result<JointGaussian> {
    let d = prior.dim();
    linalg::check_dim("empirical mean", emp_mean.len(), d)?;
    linalg::check_dim("empirical covariance", emp_cov.nrows(), d)?;
    linalg::check_dim("empirical covariance", emp_cov.ncols(), d)?;
    if !n.is_finite()
        || !linalg::all_finite_vec(emp_mean)
        || !linalg::all_finite_mat(emp_cov)
        || !linalg::all_finite_mat(&prior.phi)
        || !linalg::all_finite_vec(&prior.mu0)
    {
        return Err(Error::InvalidInput("non-finite input to NIW update".into()));
    }
    if n <= 0.0 {
        return Err(Error::Domain(format!("effective sample size must be positive, got {n}")));
    }
    let (m, n0) = (prior.m, prior.n0);
    let diff = emp_mean - &prior.mu0;
    let spread = &diff * diff.transpose() * (n * m / (n + m));
    let cov = (&prior.phi + emp_cov * n + spread) / (n + n0);
    let mean = match rule {
        MeanRule::PriorCount => (&prior.mu0 * m + emp_mean * n0) / (m + n0),
        MeanRule::Standard => (&prior.mu0 * m + emp_mean * n) / (m + n),
    };
    Ok(JointGaussian { mean, cov: linalg::symmetrize(&cov) })
}

/// `p(x' | x, u) = N(f_x x + f_u u + f_c, F)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianDynamics {
    #[serde(with = "serde_matrix")]
    pub fx: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub fu: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub fc: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub noise_cov: DMatrix<f64>,
}

impl LinearGaussianDynamics {
    pub fn state_dim(&self) -> usize {
        self.fx.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.fu.ncols()
    }

    /// Mean next state.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.fx * x + &self.fu * u + &self.fc
    }

    pub fn check_invariants(&self) -> bool {
        let finite = linalg::all_finite_mat(&self.fx)
            && linalg::all_finite_mat(&self.fu)
            && linalg::all_finite_vec(&self.fc)
            && linalg::all_finite_mat(&self.noise_cov);
        let scale = self.noise_cov.norm().max(1e-300);
        finite
            && (&self.noise_cov - self.noise_cov.transpose()).norm() <= 1e-10 * scale
            && linalg::min_eigenvalue(&self.noise_cov) >= -1e-9 * scale
    }
}

/// Conditions a joint Gaussian over `[x; u; x']` on `[x; u]`.
pub fn condition_dynamics(joint: &JointGaussian, dx: usize, du: usize) -> Result<LinearGaussianDynamics> {
    condition_dynamics_with_ridge(joint, dx, du, CONDITIONING_RIDGE)
}

/// Same as [`condition_dynamics`] with an explicit relative ridge; `0.0` gives
/// the unregularized conditional (the absolute floor still applies).
pub fn condition_dynamics_with_ridge(
    joint: &JointGaussian,
    dx: usize,
    du: usize,
    ridge: f64,
) -> Result<LinearGaussianDynamics> {
    let dz = dx + du;
    linalg::check_dim("joint Gaussian", joint.dim(), 2 * dx + du)?;
    if !linalg::all_finite_mat(&joint.cov) || !linalg::all_finite_vec(&joint.mean) {
        return Err(Error::InvalidInput("non-finite joint Gaussian".into()));
    }
    let szz = joint.cov.view((0, 0), (dz, dz)).into_owned();
    let szy = joint.cov.view((0, dz), (dz, dx)).into_owned();
    let syy = joint.cov.view((dz, dz), (dx, dx)).into_owned();
    let mu_z = joint.mean.rows(0, dz).into_owned();
    let mu_y = joint.mean.rows(dz, dx).into_owned();

    let lambda = ridge * szz.trace() / dz as f64 + CONDITIONING_RIDGE_FLOOR;
    let szz_reg = &szz + DMatrix::identity(dz, dz) * lambda;
    let chol = szz_reg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning { condition_number: linalg::condition_number(&szz_reg) })?;
    // Solve Σ_zz W = Σ_zy; the map applied to z is Wᵀ.
    let w = chol.solve(&szy);
    let fxu = w.transpose();
    if !linalg::all_finite_mat(&fxu) {
        return Err(Error::Conditioning { condition_number: linalg::condition_number(&szz_reg) });
    }
    let fc = &mu_y - &fxu * &mu_z;
    let noise = syy - &fxu * &szz_reg * fxu.transpose();
    let noise = linalg::floor_eigenvalues(&linalg::symmetrize(&noise), 0.0);
    Ok(LinearGaussianDynamics {
        fx: fxu.columns(0, dx).into_owned(),
        fu: fxu.columns(dx, du).into_owned(),
        fc,
        noise_cov: noise,
    })
}
