mod common;

use adaptmpc::dataset::{TransitionDataset, TransitionRecord};
use adaptmpc::gaussian::{condition_dynamics, JointGaussian};
use adaptmpc::nn::{Architecture, MlpModel, StateLayout};
use adaptmpc::priors::{
    estimate_residual_cov, DynamicsPrior, GaussianPrior, GmmConfig, GmmPrior, NeuralNetPrior, PriorContext,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::*;

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// `x' = 2x + u + ε` with `x, u ~ N(0, 1)` and `ε ~ N(0, 0.01²)`.
fn scalar_linear_dataset(n: usize, seed: u64) -> TransitionDataset {
    let mut r = rng(seed);
    let mut ds = TransitionDataset::new(meta(1, 1, 0.05));
    for _ in 0..n {
        let x = normal(&mut r);
        let u = normal(&mut r);
        let y = 2.0 * x + u + 0.01 * normal(&mut r);
        let v = |a: f64| DVector::from_element(1, a);
        ds.push(TransitionRecord { task: "lin".into(), x_prev: v(0.0), u_prev: v(0.0), x: v(x), u: v(u), x_next: v(y) });
    }
    ds
}

/// Noisy nonlinear data with a well-conditioned transition covariance.
fn noisy_dataset(n: usize, seed: u64) -> TransitionDataset {
    let mut r = rng(seed);
    synthetic_dataset(&mut r, n, 2, 1, 0.05, |rng, x, u| {
        let mut e = || 0.1 * rng.sample::<f64, _>(StandardNormal);
        DVector::from_vec(vec![x[0] + 0.05 * x[1] + e(), x[1] + (u[0] - x[0].sin()) * 0.05 + e()])
    })
}

fn random_context(r: &mut ChaCha8Rng, dx: usize, du: usize) -> PriorContext {
    PriorContext::new(
        uniform_vec(r, dx, -1.0, 1.0),
        uniform_vec(r, du, -1.0, 1.0),
        uniform_vec(r, dx, -1.0, 1.0),
        uniform_vec(r, du, -1.0, 1.0),
    )
}

#[test]
fn gaussian_prior_recovers_linear_system() {
    let ds = scalar_linear_dataset(10_000, 30);
    let prior = GaussianPrior::fit(&ds, 1.0, 1.0).unwrap();
    let ctx = PriorContext::first_tick(DVector::zeros(1), DVector::zeros(1));
    let d = condition_dynamics(&prior.prior_gaussian(&ctx).unwrap(), 1, 1).unwrap();
    assert!((d.fx[(0, 0)] - 2.0).abs() < 0.05 * 2.0, "{}", d.fx);
    assert!((d.fu[(0, 0)] - 1.0).abs() < 0.05, "{}", d.fu);
    assert!((d.noise_cov[(0, 0)] - 1e-4).abs() < 0.05e-4, "{}", d.noise_cov);
}

#[test]
fn gaussian_prior_scales_covariance_by_strength() {
    let ds = noisy_dataset(500, 31);
    let prior = GaussianPrior::fit(&ds, 2.5, 0.7).unwrap();
    assert!(!prior.regularized);
    let mut r = rng(31);
    let first = prior.evaluate(&random_context(&mut r, 2, 1)).unwrap();
    let ps = ds.transitions();
    let n = ps.len() as f64;
    let mean = ps.iter().fold(DVector::zeros(5), |a, p| a + p) / n;
    let cov = ps.iter().fold(DMatrix::zeros(5, 5), |a, p| a + (p - &mean) * (p - &mean).transpose()) / n;
    assert!(rel_err(&first.phi, &(cov * 2.5)) < 1e-12);
    assert!(rel_err_vec(&first.mu0, &mean) < 1e-12);
    assert_eq!((first.m, first.n0), (0.7, 2.5));
    for _ in 0..20 {
        assert_eq!(prior.evaluate(&random_context(&mut r, 2, 1)).unwrap(), first);
    }
}

#[test]
fn single_component_mixture_equals_gaussian_prior() {
    let ds = noisy_dataset(500, 32);
    let cfg = GmmConfig { components: 1, reg: 0.0, ..Default::default() };
    let gmm = GmmPrior::fit(&ds, &cfg, 1.0, 1.0).unwrap();
    let g = GaussianPrior::fit(&ds, 1.0, 1.0).unwrap();
    let mut r = rng(32);
    for _ in 0..10 {
        let ctx = random_context(&mut r, 2, 1);
        let a = gmm.evaluate(&ctx).unwrap();
        let b = g.evaluate(&ctx).unwrap();
        assert!(rel_err(&a.phi, &b.phi) < 1e-8);
        assert!(rel_err_vec(&a.mu0, &b.mu0) < 1e-8);
    }
}

fn two_cluster_dataset(seed: u64) -> TransitionDataset {
    let mut r = rng(seed);
    let mut ds = TransitionDataset::new(meta(1, 1, 0.05));
    for i in 0..400 {
        let c = if i % 2 == 0 { 10.0 } else { -10.0 };
        let mut v = || DVector::from_element(1, c + normal(&mut r));
        let (xp, up, x, u, y) = (v(), v(), v(), v(), v());
        ds.push(TransitionRecord { task: "blobs".into(), x_prev: xp, u_prev: up, x, u, x_next: y });
    }
    ds
}

#[test]
fn mixture_separates_distant_clusters() {
    let ds = two_cluster_dataset(33);
    let gmm = GmmPrior::fit(&ds, &GmmConfig { components: 2, ..Default::default() }, 1.0, 1.0).unwrap();
    let mut means: Vec<f64> = gmm.components.iter().map(|c| c.gaussian.mean.mean()).collect();
    means.sort_by(f64::total_cmp);
    assert!((means[0] + 10.0).abs() < 0.2 && (means[1] - 10.0).abs() < 0.2, "{means:?}");
    for c in &gmm.components {
        assert!((c.weight - 0.5).abs() < 0.05);
    }
    let at = |v: f64| {
        let e = DVector::from_element(1, v);
        PriorContext::new(e.clone(), e.clone(), e.clone(), e)
    };
    let hi = gmm.evaluate(&at(10.0)).unwrap();
    let lo = gmm.evaluate(&at(-10.0)).unwrap();
    assert!(hi.mu0.mean() > 9.0 && lo.mu0.mean() < -9.0);
}

#[test]
fn em_objective_never_decreases() {
    let ds = arm_dataset(4, 34);
    let gmm = GmmPrior::fit(&ds, &GmmConfig { components: 4, ..Default::default() }, 1.0, 1.0).unwrap();
    let h = &gmm.objective_history;
    assert!(h.len() >= 2);
    for w in h.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
}

fn log_density(g: &JointGaussian, idx: &[usize], q: &DVector<f64>) -> f64 {
    let k = idx.len();
    let mean = DVector::from_iterator(k, idx.iter().map(|&i| g.mean[i]));
    let cov = DMatrix::from_fn(k, k, |a, b| g.cov[(idx[a], idx[b])]);
    let e = q - mean;
    let inv = cov.clone().try_inverse().unwrap();
    -0.5 * (e.dot(&(inv * &e)) + cov.determinant().ln() + k as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn responsibilities_match_direct_densities() {
    let ds = noisy_dataset(600, 35);
    let gmm = GmmPrior::fit(&ds, &GmmConfig { components: 3, ..Default::default() }, 1.0, 1.0).unwrap();
    let (dx, du) = (2, 1);
    for rec in ds.records.iter().step_by(23) {
        let ctx = PriorContext::new(rec.x_prev.clone(), rec.u_prev.clone(), rec.x.clone(), rec.u.clone());
        let q = adaptmpc::linalg::stack(&[&rec.x_prev, &rec.u_prev, &rec.x]);
        let idx: Vec<usize> = (0..2 * dx + du).collect();
        let w: Vec<f64> =
            gmm.components.iter().map(|c| c.weight.ln() + log_density(&c.gaussian, &idx, &q)).collect();
        let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = w.iter().map(|l| (l - top).exp()).sum();
        let resp = gmm.responsibilities(&ctx).unwrap();
        for (a, l) in resp.iter().zip(&w) {
            assert!((a - (l - top).exp() / z).abs() < 1e-10);
        }
    }
}

fn random_network_prior(arch: Architecture, seed: u64) -> NeuralNetPrior {
    let mut r = rng(200 + seed);
    let mut net = MlpModel::new(arch, 4, 2, StateLayout::split_half(2), 0.05, seed).unwrap();
    for l in &mut net.layers {
        l.bias = uniform_vec(&mut r, l.bias.len(), -0.3, 0.3);
    }
    NeuralNetPrior::new(net, 0.5, random_spd(&mut r, 4, 1e-3) * 0.01, 1.0, 1.0).unwrap()
}

#[test]
fn network_prior_conditions_to_its_prediction() {
    let mut r = rng(36);
    for (i, arch) in [Architecture::Markov, Architecture::Context].into_iter().enumerate() {
        let prior = random_network_prior(arch, i as u64);
        for _ in 0..50 {
            let ctx = random_context(&mut r, 4, 2);
            let g = prior.local_gaussian(&ctx).unwrap();
            let input = match arch {
                Architecture::Markov => adaptmpc::linalg::stack(&[&ctx.x, &ctx.u]),
                Architecture::Context => adaptmpc::linalg::stack(&[
                    ctx.x_prev.as_ref().unwrap(),
                    ctx.u_prev.as_ref().unwrap(),
                    &ctx.x,
                    &ctx.u,
                ]),
            };
            let f = prior.net.forward(&input).unwrap().next_state;
            let d = condition_dynamics(&g, 4, 2).unwrap();
            assert!(rel_err_vec(&d.predict(&ctx.x, &ctx.u), &f) < 1e-8);
            let szz = g.cov.view((0, 0), (6, 6)).into_owned();
            assert_eq!(szz, DMatrix::identity(6, 6) * 0.5);
        }
    }
}

#[test]
fn context_network_reads_both_steps() {
    let prior = random_network_prior(Architecture::Context, 3);
    assert_eq!(prior.net.input_dim(), 2 * (4 + 2));
    let mut r = rng(37);
    let a = random_context(&mut r, 4, 2);
    let mut b = a.clone();
    b.x_prev = Some(uniform_vec(&mut r, 4, -1.0, 1.0));
    let ga = prior.local_gaussian(&a).unwrap();
    let gb = prior.local_gaussian(&b).unwrap();
    assert_ne!(ga.mean.rows(6, 4), gb.mean.rows(6, 4));
}

#[test]
fn every_prior_yields_valid_parameters() {
    let ds = arm_dataset(4, 38);
    let priors: Vec<Box<dyn DynamicsPrior>> = vec![
        Box::new(GaussianPrior::fit(&ds, 1.0, 1.0).unwrap()),
        Box::new(GmmPrior::fit(&ds, &GmmConfig { components: 4, ..Default::default() }, 1.0, 1.0).unwrap()),
        Box::new(random_network_prior(Architecture::Markov, 4)),
        Box::new(random_network_prior(Architecture::Context, 5)),
    ];
    let mut r = rng(38);
    for p in &priors {
        for i in 0..1000 {
            let mut ctx = random_context(&mut r, 4, 2);
            if i % 10 == 0 {
                ctx = PriorContext::first_tick(ctx.x, ctx.u);
            }
            assert!(p.evaluate(&ctx).unwrap().check_invariants());
        }
    }
}

#[test]
fn residual_covariance_of_coasting_model() {
    let mut r = rng(39);
    let dt = 0.05;
    let sigma = 0.2;
    let mut net = MlpModel::new(Architecture::Markov, 2, 1, StateLayout::split_half(1), dt, 0).unwrap();
    for l in &mut net.layers {
        l.weights.fill(0.0);
        l.bias.fill(0.0);
    }
    let ds = synthetic_dataset(&mut r, 10_000, 2, 1, dt, |rng, x, _| {
        let v = x[1] + sigma * rng.sample::<f64, _>(StandardNormal) * dt;
        DVector::from_vec(vec![x[0] + v * dt, v])
    });
    let cov = estimate_residual_cov(&net, &ds).unwrap();
    let s2 = sigma * sigma;
    let expect = DMatrix::from_row_slice(2, 2, &[dt.powi(4) * s2, dt.powi(3) * s2, dt.powi(3) * s2, dt * dt * s2]);
    assert!(rel_err(&cov, &expect) < 0.1, "{cov} vs {expect}");

    let exact = synthetic_dataset(&mut r, 200, 2, 1, dt, |_, x, _| DVector::from_vec(vec![x[0] + x[1] * dt, x[1]]));
    assert!(estimate_residual_cov(&net, &exact).unwrap().amax() < 1e-20);

    let mut shuffled = ds.clone();
    shuffled.records.shuffle(&mut r);
    let again = estimate_residual_cov(&net, &shuffled).unwrap();
    assert!(rel_err(&again, &cov) < 1e-10);
}

#[test]
fn fits_reject_small_datasets() {
    let ds = scalar_linear_dataset(3, 40);
    assert!(GaussianPrior::fit(&ds, 1.0, 1.0).is_err());
    assert!(GmmPrior::fit(&scalar_linear_dataset(30, 40), &GmmConfig::default(), 1.0, 1.0).is_err());
    let net = MlpModel::new(Architecture::Markov, 4, 2, StateLayout::split_half(2), 0.05, 0).unwrap();
    assert!(NeuralNetPrior::new(net, 0.0, DMatrix::zeros(4, 4), 1.0, 1.0).is_err());
}
