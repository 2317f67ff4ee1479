mod common;

use std::sync::Arc;

use adaptmpc::envs::{ArmConfig, ArmEnv, Environment, PointMassConfig, PointMassEnv, TaskCost, TaskCostModel};
use adaptmpc::estimator::{AdaptConfig, RunningMoments};
use adaptmpc::gaussian::{condition_dynamics, MeanRule};
use adaptmpc::ilqr::PolicyStep;
use adaptmpc::mpc::{
    exploration_covariance, read_trajectory_log, run_episode, sample_action, write_trajectory_log, Controller,
    MpcConfig,
};
use adaptmpc::priors::{DynamicsPrior, GaussianPrior, PriorContext};
use nalgebra::{DMatrix, DVector};

use common::*;

fn point_mass_controller(env: &PointMassEnv, cfg: MpcConfig) -> Controller {
    let lin = env.linear_dynamics();
    let prior = GaussianPrior::from_linear(&lin, &DVector::zeros(6), &DMatrix::identity(6, 6), 1e6, 1e6).unwrap();
    let moments = RunningMoments::new(prior.base.mean.clone(), &prior.base.cov + &prior.base.mean * prior.base.mean.transpose(), 0.9995, 1.0).unwrap();
    Controller::new(Arc::new(prior), moments, 4, 2, cfg).unwrap().with_action_limit(env.action_limit())
}

#[test]
fn perfect_model_point_mass_reaches_target() {
    let env = PointMassEnv::new(PointMassConfig { noise_fraction: 0.0, ..Default::default() }).unwrap();
    let cfg = MpcConfig { adapt: false, noise_scale: 0.0, ..Default::default() };
    let mut ctrl = point_mass_controller(&env, cfg);
    let cost = TaskCostModel { cost: TaskCost::default().with_target(env.target()), geometry: env.geometry() };
    let ep = run_episode(&env, &mut ctrl, &cost, 200, 0).unwrap();
    assert!(ep.outcome.success);
    assert!(ep.outcome.final_distance < 1e-2);
}

fn random_step(seed: u64) -> PolicyStep {
    let mut r = rng(seed);
    PolicyStep {
        x_hat: uniform_vec(&mut r, 4, -1.0, 1.0),
        u_hat: uniform_vec(&mut r, 2, -1.0, 1.0),
        gain: uniform_mat(&mut r, 2, 4, -1.0, 1.0),
        offset: uniform_vec(&mut r, 2, -0.1, 0.1),
        quu: random_spd(&mut r, 2, 0.2),
    }
}

#[test]
fn sampled_action_covariance_matches_scaled_inverse_hessian() {
    let step = random_step(70);
    let x = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
    let mean = &step.u_hat + &step.offset + &step.gain * (&x - &step.x_hat);
    let scale = 0.3;
    let mut r = rng(71);
    let n = 10_000;
    let samples: Vec<DVector<f64>> = (0..n).map(|_| sample_action(&step, &x, scale, &mut r).unwrap()).collect();
    let avg = samples.iter().fold(DVector::zeros(2), |a, s| a + s) / n as f64;
    let cov = samples.iter().fold(DMatrix::zeros(2, 2), |a, s| a + (s - &avg) * (s - &avg).transpose()) / (n - 1) as f64;
    let expected = step.quu.clone().try_inverse().unwrap() * scale;
    assert!(rel_err(&exploration_covariance(&step, scale).unwrap(), &expected) < 1e-12);
    assert!(rel_err(&cov, &expected) < 0.05, "{}", rel_err(&cov, &expected));
    assert!((&avg - &mean).norm() < 0.05);
}

#[test]
fn zero_noise_returns_the_feedback_action() {
    let step = random_step(72);
    let x = DVector::from_vec(vec![0.4, 0.1, -0.3, 0.2]);
    let mean = &step.u_hat + &step.offset + &step.gain * (&x - &step.x_hat);
    let mut r = rng(73);
    for _ in 0..10 {
        assert_eq!(sample_action(&step, &x, 0.0, &mut r).unwrap(), mean);
    }
}

struct ArmSetup {
    env: ArmEnv,
    prior: Arc<GaussianPrior>,
    moments: RunningMoments,
    cost: TaskCostModel,
}

fn arm_setup(n0: f64, m: f64) -> ArmSetup {
    let env = ArmEnv::new(ArmConfig::default()).unwrap();
    let data = arm_dataset(10, 74);
    let prior = Arc::new(GaussianPrior::fit(&data, n0, m).unwrap());
    let moments = RunningMoments::from_dataset(&data, &AdaptConfig::default()).unwrap();
    let cost = TaskCostModel { cost: TaskCost::default().with_target(env.target()), geometry: env.geometry() };
    ArmSetup { env, prior, moments, cost }
}

impl ArmSetup {
    fn controller(&self, cfg: MpcConfig) -> Controller {
        Controller::new(self.prior.clone(), self.moments.clone(), 4, 2, cfg)
            .unwrap()
            .with_action_limit(self.env.action_limit())
    }
}

#[test]
fn dominant_prior_reduces_to_fixed_model_control() {
    let s = arm_setup(1e9, 1e9);
    let ctx = PriorContext::first_tick(DVector::zeros(4), DVector::zeros(2));
    let fixed = condition_dynamics(&s.prior.prior_gaussian(&ctx).unwrap(), 4, 2).unwrap();
    let tol = 1e-6;
    for (adapt, mean_rule) in [(false, MeanRule::PriorCount), (true, MeanRule::Standard)] {
        let cfg = MpcConfig { adapt, mean_rule, noise_scale: 0.01, ..Default::default() };
        let mut ctrl = s.controller(cfg);
        let mut x = s.env.initial_state();
        for _ in 0..60 {
            let (u, diag) = ctrl.step(&x, &s.cost).unwrap();
            let d = diag.dynamics.unwrap();
            if adapt {
                assert!(rel_err(&d.fx, &fixed.fx) <= tol, "{}", rel_err(&d.fx, &fixed.fx));
                assert!(rel_err(&d.fu, &fixed.fu) <= tol);
                assert!(rel_err_vec(&d.fc, &fixed.fc) <= tol);
            } else {
                assert_eq!(d, fixed);
            }
            x = s.env.dynamics(&x, &u);
        }
    }
}

#[test]
fn planning_dynamics_stay_valid_over_many_ticks() {
    let s = arm_setup(1.0, 1.0);
    let mut ticks = 0;
    for seed in 0..5 {
        let cfg = MpcConfig { noise_scale: 0.01, seed, ..Default::default() };
        let mut ctrl = s.controller(cfg);
        let ep = run_episode(&s.env, &mut ctrl, &s.cost, 200, seed).unwrap();
        assert!(!ep.outcome.aborted);
        let mut replay = s.controller(MpcConfig { noise_scale: 0.01, seed, ..Default::default() });
        for tick in &ep.ticks {
            let (_, diag) = replay.step(&tick.x, &s.cost).unwrap();
            assert!(diag.dynamics.unwrap().check_invariants());
            assert!(replay.moments.covariance().iter().all(|v| v.is_finite()));
            ticks += 1;
        }
    }
    assert!(ticks >= 1000);
}

#[test]
fn warm_start_rarely_loses_to_cold_start() {
    let s = arm_setup(1.0, 1.0);
    let mut ctrl = s.controller(MpcConfig { adapt: false, noise_scale: 0.01, ..Default::default() });
    let mut x = s.env.initial_state();
    let (mut wins, mut total) = (0, 0);
    for t in 0..200 {
        if t > 0 {
            let (d, _) = ctrl.local_dynamics(&x).unwrap();
            let warm = ctrl.plan(&d, &x, &s.cost, true).unwrap();
            let cold = ctrl.plan(&d, &x, &s.cost, false).unwrap();
            total += 1;
            if warm.total_cost <= cold.total_cost * (1.0 + 1e-12) {
                wins += 1;
            }
        }
        let (u, _) = ctrl.step(&x, &s.cost).unwrap();
        x = s.env.dynamics(&x, &u);
    }
    assert!(wins as f64 >= 0.8 * total as f64, "{wins}/{total}");
}

#[test]
fn episodes_are_deterministic_and_logs_roundtrip() {
    let s = arm_setup(1.0, 1.0);
    let cfg = MpcConfig { noise_scale: 0.01, seed: 3, ..Default::default() };
    let a = run_episode(&s.env, &mut s.controller(cfg.clone()), &s.cost, 80, 3).unwrap();
    let b = run_episode(&s.env, &mut s.controller(cfg.clone()), &s.cost, 80, 3).unwrap();
    assert_eq!(a.states, b.states);
    assert!(a.ticks.iter().zip(&b.ticks).all(|(p, q)| p.same_trajectory(q)));
    let c = run_episode(&s.env, &mut s.controller(MpcConfig { seed: 4, ..cfg }), &s.cost, 80, 4).unwrap();
    assert_ne!(a.states, c.states);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trial.jsonl");
    write_trajectory_log(&path, &a.ticks).unwrap();
    assert_eq!(read_trajectory_log(&path).unwrap(), a.ticks);
    assert!(read_trajectory_log(&dir.path().join("absent.jsonl")).is_err());
}

#[test]
fn mismatched_rate_is_rejected() {
    let s = arm_setup(1.0, 1.0);
    let mut ctrl = s.controller(MpcConfig { rate: 10.0, ..Default::default() });
    assert!(run_episode(&s.env, &mut ctrl, &s.cost, 5, 0).is_err());
    assert!(Controller::new(s.prior.clone(), s.moments.clone(), 4, 2, MpcConfig { horizon: 0, ..Default::default() }).is_err());
}
