//! Streaming transition moments with exponential forgetting and the adaptive
//! rule that retunes the forgetting factor and effective sample size.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{Error, Result};
use crate::gaussian::{condition_dynamics, JointGaussian};
use crate::linalg::{self, serde_vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub eta0: f64,
    pub nu0: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_min: f64,
    pub n_max: f64,
    /// Value `ρ` takes when the prior predicts the last transition exactly.
    pub rho_floor: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { eta0: 8.0, nu0: 1.0, beta_min: 0.0, beta_max: 0.9995, n_min: 1.0, n_max: 50.0, rho_floor: 1e-8 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta0 > 0.0
            && self.nu0 > 0.0
            && self.beta_min >= 0.0
            && self.beta_min <= self.beta_max
            && self.beta_max < 1.0
            && self.n_min > 0.0
            && self.n_min <= self.n_max
            && self.rho_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid adaptation config {self:?}")))
        }
    }

    /// `β = clamp(1 − η₀ρ)`, `N = clamp(ν₀/ρ)`.
    pub fn beta_and_n(&self, rho: f64) -> (f64, f64) {
        let beta = (1.0 - self.eta0 * rho).clamp(self.beta_min, self.beta_max);
        let n = if rho > 0.0 { self.nu0 / rho } else { f64::INFINITY };
        (beta, n.clamp(self.n_min, self.n_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub rho: f64,
    pub beta: f64,
    pub n_eff: f64,
}

/// Exponentially weighted mean `μ̂` and second moment `Δ` of stacked transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
    pub beta: f64,
    pub n_eff: f64,
    pub last_obs: Option<DVector<f64>>,
}

impl RunningMoments {
    pub fn new(mean: DVector<f64>, second_moment: DMatrix<f64>, beta: f64, n_eff: f64) -> Result<Self> {
        let d = mean.len();
        linalg::check_dim("second moment", second_moment.nrows(), d)?;
        linalg::check_dim("second moment", second_moment.ncols(), d)?;
        if !(0.0..1.0).contains(&beta) || n_eff <= 0.0 {
            return Err(Error::Domain(format!("beta={beta} must lie in [0,1), n_eff={n_eff} must be positive")));
        }
        Ok(Self { mean, second_moment: linalg::symmetrize(&second_moment), beta, n_eff, last_obs: None })
    }

    /// Zero moments of dimension `d`.
    pub fn zeros(d: usize, beta: f64, n_eff: f64) -> Result<Self> {
        Self::new(DVector::zeros(d), DMatrix::zeros(d, d), beta, n_eff)
    }

    /// Batch mean and second moment of every stacked transition in `dataset`.
    pub fn from_dataset(dataset: &TransitionDataset, cfg: &AdaptConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidInput("cannot initialize moments from an empty dataset".into()));
        }
        let d = dataset.transition_dim();
        let n = dataset.len() as f64;
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for p in dataset.transitions() {
            mean += &p;
            second.ger(1.0, &p, &p, 1.0);
        }
        mean /= n;
        second /= n;
        Self::new(mean, second, cfg.beta_max, cfg.n_min)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ̂ = Δ − μ̂μ̂ᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.second_moment - &self.mean * self.mean.transpose()))
    }

    pub fn empirical_gaussian(&self) -> JointGaussian {
        JointGaussian { mean: self.mean.clone(), cov: self.covariance() }
    }

    /// Folds in one stacked observation `[x_{t-1}; u_{t-1}; x_t]` using the current β.
    pub fn observe(&mut self, p: &DVector<f64>) -> Result<()> {
        linalg::check_dim("observation", p.len(), self.dim())?;
        if !linalg::all_finite_vec(p) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        let b = self.beta;
        self.mean = &self.mean * b + p * (1.0 - b);
        let mut delta = &self.second_moment * b;
        delta.ger(1.0 - b, p, p, 1.0);
        self.second_moment = linalg::symmetrize(&delta);
        self.last_obs = Some(p.clone());
        Ok(())
    }

    /// Compares how well the empirical and prior models predict `x_t` from
    /// `(x_prev, u_prev)` and returns the refreshed `(ρ, β, N)` without applying it.
    pub fn adapt(
        &self,
        prior_gaussian: &JointGaussian,
        x_prev: &DVector<f64>,
        u_prev: &DVector<f64>,
        x_t: &DVector<f64>,
        cfg: &AdaptConfig,
    ) -> Result<Adaptation> {
        let (dx, du) = (x_t.len(), u_prev.len());
        linalg::check_dim("previous state", x_prev.len(), dx)?;
        linalg::check_dim("moments", self.dim(), 2 * dx + du)?;
        let empirical = condition_dynamics(&self.empirical_gaussian(), dx, du)?;
        let prior = condition_dynamics(prior_gaussian, dx, du)?;
        let emp_err = (empirical.predict(x_prev, u_prev) - x_t).norm_squared();
        let prior_err = (prior.predict(x_prev, u_prev) - x_t).norm_squared();
        let rho = if prior_err == 0.0 { cfg.rho_floor } else { emp_err / prior_err };
        let (beta, n_eff) = cfg.beta_and_n(rho);
        Ok(Adaptation { rho, beta, n_eff })
    }

    pub fn apply(&mut self, a: &Adaptation) {
        self.beta = a.beta;
        self.n_eff = a.n_eff;
    }

    pub fn to_checkpoint(&self) -> MomentsCheckpoint {
        MomentsCheckpoint {
            mean: self.mean.clone(),
            delta: linalg::to_row_major(&self.second_moment),
            beta: self.beta,
            n_eff: self.n_eff,
        }
    }

    pub fn from_checkpoint(c: &MomentsCheckpoint) -> Result<Self> {
        let d = c.mean.len();
        Self::new(c.mean.clone(), linalg::from_row_major(d, d, &c.delta)?, c.beta, c.n_eff)
    }
}

/// Flat JSON form of [`RunningMoments`]: mean, row-major `delta`, `beta`, `n_eff`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsCheckpoint {
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    pub delta: Vec<f64>,
    pub beta: f64,
    pub n_eff: f64,
}
