//! Dynamics priors that turn the recent transition context into
//! normal-inverse-Wishart parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{Error, Result};
use crate::gaussian::{JointGaussian, LinearGaussianDynamics, NiwParams};
use crate::linalg::{self, serde_matrix};
use crate::nn::{Architecture, MlpModel};

pub const PRIOR_FORMAT: &str = "adaptmpc-prior";
pub const PRIOR_VERSION: u32 = 1;

/// What a prior may look at: the previous step (absent on the first tick) and
/// the current state with the action about to be taken.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorContext {
    pub x_prev: Option<DVector<f64>>,
    pub u_prev: Option<DVector<f64>>,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

impl PriorContext {
    pub fn new(x_prev: DVector<f64>, u_prev: DVector<f64>, x: DVector<f64>, u: DVector<f64>) -> Self {
        Self { x_prev: Some(x_prev), u_prev: Some(u_prev), x, u }
    }

    pub fn first_tick(x: DVector<f64>, u: DVector<f64>) -> Self {
        Self { x_prev: None, u_prev: None, x, u }
    }
}

pub trait DynamicsPrior: Send + Sync {
    fn evaluate(&self, ctx: &PriorContext) -> Result<NiwParams>;

    /// `N(μ₀, Φ/n₀)` at the given context.
    fn prior_gaussian(&self, ctx: &PriorContext) -> Result<JointGaussian> {
        Ok(self.evaluate(ctx)?.prior_gaussian())
    }
}

fn dataset_moments(rows: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += r;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let e = r - &mean;
        cov.ger(1.0 / n, &e, &e, 1.0);
    }
    (mean, linalg::symmetrize(&cov))
}

/// A single global Gaussian over transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub base: JointGaussian,
    pub n0: f64,
    pub m: f64,
    /// Set when the dataset covariance was rank deficient and had to be ridged.
    pub regularized: bool,
}

impl GaussianPrior {
    pub fn fit(dataset: &TransitionDataset, n0: f64, m: f64) -> Result<Self> {
        let d = dataset.transition_dim();
        if dataset.len() < d + 1 {
            return Err(Error::InvalidInput(format!(
                "Gaussian prior needs at least {} rows, got {}",
                d + 1,
                dataset.len()
            )));
        }
        let (mean, mut cov) = dataset_moments(&dataset.transitions());
        let scale = (cov.trace() / d as f64).max(1e-300);
        let regularized = linalg::min_eigenvalue(&cov) < 1e-8 * scale;
        if regularized {
            log::warn!("rank-deficient prior dataset; adding 1e-8 I to the covariance");
            cov += DMatrix::identity(d, d) * 1e-8;
        }
        Ok(Self { base: JointGaussian::new(mean, cov)?, n0, m, regularized })
    }

    /// The joint Gaussian whose conditional is exactly `dynamics`, given a
    /// marginal `N(z_mean, z_cov)` over `[x; u]`.
    pub fn from_linear(
        dynamics: &LinearGaussianDynamics,
        z_mean: &DVector<f64>,
        z_cov: &DMatrix<f64>,
        n0: f64,
        m: f64,
    ) -> Result<Self> {
        let (dx, du) = (dynamics.state_dim(), dynamics.action_dim());
        let dz = dx + du;
        linalg::check_dim("marginal mean", z_mean.len(), dz)?;
        linalg::check_dim("marginal covariance", z_cov.nrows(), dz)?;
        let mut f = DMatrix::zeros(dx, dz);
        f.columns_mut(0, dx).copy_from(&dynamics.fx);
        f.columns_mut(dx, du).copy_from(&dynamics.fu);
        let mut cov = DMatrix::zeros(dz + dx, dz + dx);
        cov.view_mut((0, 0), (dz, dz)).copy_from(z_cov);
        let cross = &f * z_cov;
        cov.view_mut((dz, 0), (dx, dz)).copy_from(&cross);
        cov.view_mut((0, dz), (dz, dx)).copy_from(&cross.transpose());
        cov.view_mut((dz, dz), (dx, dx)).copy_from(&(&cross * f.transpose() + &dynamics.noise_cov));
        let mean = linalg::stack(&[z_mean, &(&f * z_mean + &dynamics.fc)]);
        Ok(Self { base: JointGaussian::new(mean, cov)?, n0, m, regularized: false })
    }
}

impl DynamicsPrior for GaussianPrior {
    fn evaluate(&self, _ctx: &PriorContext) -> Result<NiwParams> {
        NiwParams::new(&self.base.cov * self.n0, self.base.mean.clone(), self.m, self.n0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub gaussian: JointGaussian,
}

/// Gaussian mixture over transitions; evaluation picks the component that best
/// explains the most recent transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub components: Vec<GmmComponent>,
    pub n0: f64,
    pub m: f64,
    /// Responsibility-weighted moments instead of the single best component.
    #[serde(default)]
    pub soft: bool,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Penalized log-likelihood after each EM iteration.
    #[serde(default)]
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the per-sample objective improves by less than this.
    pub tol: f64,
    /// Relative covariance penalty; scaled by the mean data variance.
    pub reg: f64,
    pub seed: u64,
    pub max_reseeds: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { components: 8, max_iters: 200, tol: 1e-6, reg: 1e-6, seed: 0, max_reseeds: 5 }
    }
}

struct Density {
    chol_l: DMatrix<f64>,
    log_norm: f64,
    mean: DVector<f64>,
}

impl Density {
    fn new(g: &JointGaussian) -> Option<Self> {
        let d = g.dim() as f64;
        let chol = g.cov.clone().cholesky()?;
        let l = chol.l();
        let log_det: f64 = l.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Some(Self { chol_l: l, log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det), mean: g.mean.clone() })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.mean;
        let z = self.chol_l.solve_lower_triangular(&e).expect("triangular solve");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn kmeans_pp(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..data.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(data[next].clone());
        let c = centers.last().unwrap();
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min((x - c).norm_squared());
        }
    }
    centers
}

impl GmmPrior {
    pub fn fit(dataset: &TransitionDataset, cfg: &GmmConfig, n0: f64, m: f64) -> Result<Self> {
        let k = cfg.components;
        if k == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if dataset.len() < 10 * k {
            return Err(Error::InvalidInput(format!(
                "mixture with {k} components needs at least {} rows, got {}",
                10 * k,
                dataset.len()
            )));
        }
        let data = dataset.transitions();
        let n = data.len();
        let d = data[0].len();
        let (global_mean, global_cov) = dataset_moments(&data);
        let lambda = cfg.reg * (global_cov.trace() / d as f64).max(1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        // Hard assignment to k-means++ seeds gives the first responsibilities.
        let centers = kmeans_pp(&data, k, &mut rng);
        let mut resp = DMatrix::zeros(n, k);
        for (i, x) in data.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    (x - &centers[a]).norm_squared().total_cmp(&(x - &centers[b]).norm_squared())
                })
                .unwrap();
            resp[(i, best)] = 1.0;
        }

        let mut reseeds = 0usize;
        let mut components = Vec::with_capacity(k);
        let mut history: Vec<f64> = Vec::new();
        for _ in 0..cfg.max_iters {
            // M step.
            components.clear();
            let mut collapsed = Vec::new();
            for j in 0..k {
                let nk: f64 = resp.column(j).sum();
                if nk < 1e-8 * n as f64 {
                    collapsed.push(j);
                    components.push(GmmComponent {
                        weight: 0.0,
                        gaussian: JointGaussian { mean: global_mean.clone(), cov: global_cov.clone() },
                    });
                    continue;
                }
                let mut mean = DVector::zeros(d);
                for (i, x) in data.iter().enumerate() {
                    mean.axpy(resp[(i, j)], x, 1.0);
                }
                mean /= nk;
                let mut scatter = DMatrix::identity(d, d) * lambda;
                for (i, x) in data.iter().enumerate() {
                    let e = x - &mean;
                    scatter.ger(resp[(i, j)], &e, &e, 1.0);
                }
                let cov = linalg::symmetrize(&(scatter / nk));
                if linalg::min_eigenvalue(&cov) < 1e-10 {
                    collapsed.push(j);
                }
                components.push(GmmComponent { weight: nk / n as f64, gaussian: JointGaussian { mean, cov } });
            }
            if !collapsed.is_empty() {
                reseeds += collapsed.len();
                if reseeds > cfg.max_reseeds {
                    return Err(Error::Fit(format!("mixture components collapsed {reseeds} times")));
                }
                for &j in &collapsed {
                    let pick = data[rng.random_range(0..n)].clone();
                    components[j] = GmmComponent {
                        weight: 1.0 / k as f64,
                        gaussian: JointGaussian { mean: pick, cov: global_cov.clone() + DMatrix::identity(d, d) * lambda },
                    };
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                components.iter_mut().for_each(|c| c.weight /= total);
                history.clear();
            }

            // E step, also yielding the objective for the parameters just fitted.
            let dens: Vec<Density> = components
                .iter()
                .map(|c| Density::new(&c.gaussian).ok_or_else(|| Error::Fit("component covariance not PD".into())))
                .collect::<Result<_>>()?;
            let mut loglik = 0.0;
            let mut row = vec![0.0; k];
            for (i, x) in data.iter().enumerate() {
                for j in 0..k {
                    row[j] = components[j].weight.ln() + dens[j].log_pdf(x);
                }
                let lse = log_sum_exp(&row);
                loglik += lse;
                for j in 0..k {
                    resp[(i, j)] = (row[j] - lse).exp();
                }
            }
            let penalty: f64 = components
                .iter()
                .map(|c| {
                    let inv = c.gaussian.cov.clone().cholesky().map(|ch| ch.inverse().trace()).unwrap_or(0.0);
                    0.5 * lambda * inv
                })
                .sum();
            let objective = loglik - penalty;
            let done = history.last().map_or(false, |&prev| (objective - prev) / (n as f64) < cfg.tol);
            history.push(objective);
            if done {
                break;
            }
        }

        Ok(Self {
            components,
            n0,
            m,
            soft: false,
            state_dim: dataset.state_dim(),
            action_dim: dataset.action_dim(),
            objective_history: history,
        })
    }

    /// The query and the transition-vector indices it covers.
    fn query(&self, ctx: &PriorContext) -> (DVector<f64>, Vec<usize>) {
        let (dx, du) = (self.state_dim, self.action_dim);
        match (&ctx.x_prev, &ctx.u_prev) {
            (Some(xp), Some(up)) => (linalg::stack(&[xp, up, &ctx.x]), (0..2 * dx + du).collect()),
            _ => (ctx.x.clone(), (dx + du..2 * dx + du).collect()),
        }
    }

    /// Posterior component probabilities of the latest transition, with each
    /// component marginalized to the observed dimensions.
    pub fn responsibilities(&self, ctx: &PriorContext) -> Result<Vec<f64>> {
        let (q, idx) = self.query(ctx);
        let mut logs = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| c.gaussian.mean[i]));
            let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| c.gaussian.cov[(idx[a], idx[b])]);
            let dens = Density::new(&JointGaussian { mean, cov })
                .ok_or_else(|| Error::Evaluation("component covariance not PD".into()))?;
            logs.push(c.weight.ln() + dens.log_pdf(&q));
        }
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Ok(Vec::new());
        }
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    fn selected_gaussian(&self, ctx: &PriorContext) -> Result<JointGaussian> {
        let resp = self.responsibilities(ctx)?;
        if resp.is_empty() {
            let best = self
                .components
                .iter()
                .max_by(|a, b| a.weight.total_cmp(&b.weight))
                .ok_or_else(|| Error::Evaluation("empty mixture".into()))?;
            return Ok(best.gaussian.clone());
        }
        if !self.soft {
            let j = (0..resp.len()).max_by(|&a, &b| resp[a].total_cmp(&resp[b])).unwrap();
            return Ok(self.components[j].gaussian.clone());
        }
        let d = self.components[0].gaussian.dim();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for (r, c) in resp.iter().zip(&self.components) {
            mean.axpy(*r, &c.gaussian.mean, 1.0);
            second += (&c.gaussian.cov + &c.gaussian.mean * c.gaussian.mean.transpose()) * *r;
        }
        let cov = second - &mean * mean.transpose();
        JointGaussian::new(mean, linalg::symmetrize(&cov))
    }
}

impl DynamicsPrior for GmmPrior {
    fn evaluate(&self, ctx: &PriorContext) -> Result<NiwParams> {
        let g = self.selected_gaussian(ctx)?;
        NiwParams::new(&g.cov * self.n0, g.mean, self.m, self.n0)
    }
}

/// Prior built by linearizing a trained network at the current state and action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralNetPrior {
    pub net: MlpModel,
    /// Scale of the isotropic state-action covariance.
    pub alpha: f64,
    #[serde(with = "serde_matrix")]
    pub residual_cov: DMatrix<f64>,
    pub n0: f64,
    pub m: f64,
}

impl NeuralNetPrior {
    pub fn new(net: MlpModel, alpha: f64, residual_cov: DMatrix<f64>, n0: f64, m: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        linalg::check_dim("residual covariance", residual_cov.nrows(), net.state_dim)?;
        Ok(Self { net, alpha, residual_cov, n0, m })
    }

    fn network_input(&self, ctx: &PriorContext) -> DVector<f64> {
        match self.net.architecture {
            Architecture::Markov => linalg::stack(&[&ctx.x, &ctx.u]),
            Architecture::Context => {
                // Without history the current step stands in for the previous one.
                let xp = ctx.x_prev.as_ref().unwrap_or(&ctx.x);
                let up = ctx.u_prev.as_ref().unwrap_or(&ctx.u);
                linalg::stack(&[xp, up, &ctx.x, &ctx.u])
            }
        }
    }

    /// Mean and covariance of the locally linearized network over `[x; u; x']`.
    pub fn local_gaussian(&self, ctx: &PriorContext) -> Result<JointGaussian> {
        let (dx, du) = (self.net.state_dim, self.net.action_dim);
        linalg::check_dim("state", ctx.x.len(), dx)?;
        linalg::check_dim("action", ctx.u.len(), du)?;
        let input = self.network_input(ctx);
        let pred = self.net.forward(&input)?;
        let full = self.net.jacobian(&input)?;
        if !linalg::all_finite_vec(&pred.next_state) || !linalg::all_finite_mat(&full) {
            return Err(Error::Evaluation("network produced non-finite output".into()));
        }
        let dz = dx + du;
        let jac = full.columns(self.net.current_state_offset(), dz).into_owned();
        let szz = DMatrix::identity(dz, dz) * self.alpha;
        let syz = &jac * &szz;
        let syy = &jac * &szz * jac.transpose() + &self.residual_cov;
        let mut cov = DMatrix::zeros(dz + dx, dz + dx);
        cov.view_mut((0, 0), (dz, dz)).copy_from(&szz);
        cov.view_mut((dz, 0), (dx, dz)).copy_from(&syz);
        cov.view_mut((0, dz), (dz, dx)).copy_from(&syz.transpose());
        cov.view_mut((dz, dz), (dx, dx)).copy_from(&syy);
        let mean = linalg::stack(&[&ctx.x, &ctx.u, &pred.next_state]);
        Ok(JointGaussian { mean, cov: linalg::symmetrize(&cov) })
    }
}

impl DynamicsPrior for NeuralNetPrior {
    fn evaluate(&self, ctx: &PriorContext) -> Result<NiwParams> {
        let g = self.local_gaussian(ctx)?;
        NiwParams::new(&g.cov * self.n0, g.mean, self.m, self.n0)
    }
}

/// Covariance of the network's next-state residuals over a dataset.
pub fn estimate_residual_cov(net: &MlpModel, dataset: &TransitionDataset) -> Result<DMatrix<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("residual covariance needs a non-empty dataset".into()));
    }
    let residuals = dataset
        .records
        .iter()
        .map(|r| Ok(&r.x_next - net.forward(&net.input_for(r))?.next_state))
        .collect::<Result<Vec<_>>>()?;
    let (_, cov) = dataset_moments(&residuals);
    Ok(linalg::floor_eigenvalues(&cov, 0.0))
}

/// Any of the supported priors, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PriorModel {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Network(NeuralNetPrior),
}

impl DynamicsPrior for PriorModel {
    fn evaluate(&self, ctx: &PriorContext) -> Result<NiwParams> {
        match self {
            PriorModel::Gaussian(p) => p.evaluate(ctx),
            PriorModel::Gmm(p) => p.evaluate(ctx),
            PriorModel::Network(p) => p.evaluate(ctx),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PriorDocument {
    format: String,
    version: u32,
    prior: PriorModel,
}

impl PriorModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PriorDocument {
            format: PRIOR_FORMAT.into(),
            version: PRIOR_VERSION,
            prior: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PriorDocument = serde_json::from_str(s)?;
        if doc.format != PRIOR_FORMAT || doc.version != PRIOR_VERSION {
            return Err(Error::InvalidInput(format!("unsupported prior document {} v{}", doc.format, doc.version)));
        }
        Ok(doc.prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TransitionRecord;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_dataset(n: usize, seed: u64) -> TransitionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = TransitionDataset::default();
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = |a: f64| DVector::from_element(1, a);
            ds.push(TransitionRecord {
                task: "lin".into(),
                x_prev: v(0.0),
                u_prev: v(0.0),
                x: v(x),
                u: v(u),
                x_next: v(2.0 * x + u + 0.01 * e),
            });
        }
        ds
    }

    fn ctx(a: f64) -> PriorContext {
        let v = |x: f64| DVector::from_element(1, x);
        PriorContext::new(v(a), v(-a), v(2.0 * a), v(0.5))
    }

    #[test]
    fn gaussian_prior_is_context_free() {
        let p = GaussianPrior::fit(&linear_dataset(200, 1), 1.0, 1.0).unwrap();
        assert_eq!(p.evaluate(&ctx(0.3)).unwrap(), p.evaluate(&ctx(-7.0)).unwrap());
        let niw = p.evaluate(&ctx(0.0)).unwrap();
        assert_eq!(niw.phi, p.base.cov);
        assert_eq!(niw.mu0, p.base.mean);
    }

    #[test]
    fn too_few_rows() {
        assert!(GaussianPrior::fit(&linear_dataset(3, 1), 1.0, 1.0).is_err());
        assert!(GmmPrior::fit(&linear_dataset(15, 1), &GmmConfig { components: 2, ..Default::default() }, 1.0, 1.0)
            .is_err());
    }

    #[test]
    fn rank_deficient_dataset_is_ridged() {
        let mut ds = linear_dataset(100, 2);
        for r in &mut ds.records {
            r.x_next[0] = 2.0 * r.x[0] + r.u[0];
        }
        let p = GaussianPrior::fit(&ds, 1.0, 1.0).unwrap();
        assert!(p.regularized);
        assert!(p.base.cov.clone().cholesky().is_some());
    }

    #[test]
    fn gmm_falls_back_when_responsibilities_underflow() {
        let p = GmmPrior::fit(&linear_dataset(200, 3), &GmmConfig { components: 2, ..Default::default() }, 1.0, 1.0)
            .unwrap();
        let far = ctx(1e200);
        let niw = p.evaluate(&far).unwrap();
        let heaviest = p.components.iter().max_by(|a, b| a.weight.total_cmp(&b.weight)).unwrap();
        assert_eq!(niw.mu0, heaviest.gaussian.mean);
    }

    #[test]
    fn prior_document_roundtrip_and_version_check() {
        let p = PriorModel::Gaussian(GaussianPrior::fit(&linear_dataset(50, 4), 1.0, 1.0).unwrap());
        let s = p.to_json().unwrap();
        assert_eq!(PriorModel::from_json(&s).unwrap(), p);
        let bad = s.replace("\"version\":1", "\"version\":99");
        assert!(PriorModel::from_json(&bad).is_err());
    }
}
