#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    adaptmpc::rng_from_seed(seed, 0)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

pub fn uniform_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// `AAᵀ + εI` with entries of `A` in [-1, 1].
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> DMatrix<f64> {
    let a = uniform_mat(rng, n, n, -1.0, 1.0);
    &a * a.transpose() + DMatrix::identity(n, n) * eps
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Direct conditional `Σ_yz (Σ_zz + λI)⁻¹` with the library's ridge, via an LU solve.
pub fn conditional_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    dx: usize,
    du: usize,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    use adaptmpc::gaussian::{CONDITIONING_RIDGE, CONDITIONING_RIDGE_FLOOR};
    let dz = dx + du;
    let szz = cov.view((0, 0), (dz, dz)).into_owned();
    let syz = cov.view((dz, 0), (dx, dz)).into_owned();
    let syy = cov.view((dz, dz), (dx, dx)).into_owned();
    let lambda = CONDITIONING_RIDGE * szz.trace() / dz as f64 + CONDITIONING_RIDGE_FLOOR;
    let reg = &szz + DMatrix::identity(dz, dz) * lambda;
    let inv = reg.clone().lu().try_inverse().expect("invertible");
    let gain = &syz * &inv;
    let fc = mean.rows(dz, dx) - &gain * mean.rows(0, dz);
    let noise = syy - &gain * syz.transpose();
    (gain, fc, noise)
}

use adaptmpc::dataset::{DatasetMeta, TransitionDataset, TransitionRecord};
use adaptmpc::envs::collect::{collect_dataset, CollectionPolicy, CollectionSpec};
use adaptmpc::envs::{ArmConfig, ArmEnv};

/// Random-torque data from the free two-link arm.
pub fn arm_dataset(episodes: usize, seed: u64) -> TransitionDataset {
    let env = ArmEnv::new(ArmConfig::default()).unwrap();
    let spec = CollectionSpec {
        task: "free".into(),
        policy: CollectionPolicy::RandomTorque { scale: 0.3, hold: 4 },
        episodes,
        steps: 100,
        init_jitter: 0.5,
    };
    collect_dataset(&env, &spec, seed).unwrap()
}

pub fn meta(state_dim: usize, action_dim: usize, dt: f64) -> DatasetMeta {
    DatasetMeta {
        env_id: "synthetic".into(),
        dt,
        policy: "random".into(),
        seed: 0,
        state_dim,
        action_dim,
        episodes: 1,
    }
}

/// Records from `x' = step(x, u)` with uniformly drawn `(x_prev, u_prev, x, u)`.
pub fn synthetic_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    dx: usize,
    du: usize,
    dt: f64,
    mut step: impl FnMut(&mut ChaCha8Rng, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
) -> TransitionDataset {
    let mut ds = TransitionDataset::new(meta(dx, du, dt));
    for _ in 0..n {
        let x_prev = uniform_vec(rng, dx, -1.0, 1.0);
        let u_prev = uniform_vec(rng, du, -1.0, 1.0);
        let x = uniform_vec(rng, dx, -1.0, 1.0);
        let u = uniform_vec(rng, du, -1.0, 1.0);
        let x_next = step(rng, &x, &u);
        ds.push(TransitionRecord { task: "synthetic".into(), x_prev, u_prev, x, u, x_next });
    }
    ds
}
