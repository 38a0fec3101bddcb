use nalgebra::{DMatrix, DVector, Vector3};
use nmpc_tuner::nmpc::{
    solve_cftoc, CftocSolution, Controller, KinematicModel, NmpcConfig, NmpcError, NmpcSettings, SolveStatus, WeightMatrices,
};
use nmpc_tuner::robot::{DhParameters, JointLimits, Manipulator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{lq_oracle, wide_limits, LinearArm};

fn toy() -> (LinearArm, NmpcConfig) {
    let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, -0.3, 0.1, 0.0, 0.8]);
    (LinearArm { c }, NmpcConfig::new(NmpcSettings::default(), wide_limits(3, 1e3)).unwrap())
}

fn toy_targets(nh: usize) -> Vec<Vector3<f64>> {
    (0..nh).map(|k| Vector3::new(0.01 * k as f64, -0.004 * k as f64, 0.02)).collect()
}

fn rms_du(sol: &CftocSolution, u_prev: &[f64]) -> f64 {
    let (nh, n) = sol.inputs.shape();
    let mut s = 0.0;
    for k in 0..nh {
        for i in 0..n {
            let prev = if k == 0 { u_prev[i] } else { sol.inputs[(k - 1, i)] };
            s += (sol.inputs[(k, i)] - prev).powi(2);
        }
    }
    (s / nh as f64).sqrt()
}

fn tracking_term(sol: &CftocSolution, targets: &[Vector3<f64>]) -> f64 {
    sol.predicted_p.iter().zip(targets).map(|(p, t)| (p - t).norm_squared()).sum()
}

#[test]
fn multi_joint_lq_matches_normal_equations() {
    let (arm, cfg) = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let nh = cfg.settings.horizon;
    for _ in 0..50 {
        let q0: Vec<f64> = (0..3).map(|_| rng.random_range(-0.2..0.2)).collect();
        let u_prev: Vec<f64> = (0..3).map(|_| rng.random_range(-0.1..0.1)).collect();
        let p0 = arm.c.clone() * DVector::from_column_slice(&q0);
        let targets: Vec<Vector3<f64>> = (0..nh)
            .map(|_| Vector3::new(p0[0], p0[1], p0[2]) + Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0))
            .collect();
        let qw = [10f64.powf(rng.random_range(0.0..4.0)), 10f64.powf(rng.random_range(0.0..4.0)), 1.0];
        let rw: Vec<f64> = (0..3).map(|_| 10f64.powf(rng.random_range(-3.0..0.0))).collect();
        let sol = solve_cftoc(&arm, &cfg, &WeightMatrices::new(qw, rw.clone()).unwrap(), &q0, &u_prev, &targets, None).unwrap();
        let oracle = lq_oracle(&arm.c, &q0, &u_prev, &targets, qw, &rw, cfg.settings.ts_s);
        let got = DVector::from_column_slice(sol.inputs.transpose().as_slice());
        assert!((&got - &oracle).norm() <= 1e-6 * oracle.norm().max(1.0));
    }
}

#[test]
fn larger_rate_weight_does_not_increase_input_rate() {
    let (arm, cfg) = toy();
    let targets = toy_targets(cfg.settings.horizon);
    let (q0, u_prev) = ([0.0; 3], [0.05, -0.02, 0.0]);
    let base = WeightMatrices::new([100.0, 50.0, 20.0], vec![0.01, 0.02, 0.005]).unwrap();
    let heavy = WeightMatrices::new(*base.q(), base.r().iter().map(|r| r * 10.0).collect()).unwrap();
    let a = solve_cftoc(&arm, &cfg, &base, &q0, &u_prev, &targets, None).unwrap();
    let b = solve_cftoc(&arm, &cfg, &heavy, &q0, &u_prev, &targets, None).unwrap();
    assert!(rms_du(&b, &u_prev) <= rms_du(&a, &u_prev) + 1e-12);
}

#[test]
fn larger_tracking_weight_does_not_increase_tracking_cost() {
    let (arm, cfg) = toy();
    let targets = toy_targets(cfg.settings.horizon);
    let (q0, u_prev) = ([0.0; 3], [0.05, -0.02, 0.0]);
    let base = WeightMatrices::new([100.0, 50.0, 20.0], vec![0.01, 0.02, 0.005]).unwrap();
    let heavy = WeightMatrices::new(base.q().map(|q| q * 10.0), base.r().to_vec()).unwrap();
    let a = solve_cftoc(&arm, &cfg, &base, &q0, &u_prev, &targets, None).unwrap();
    let b = solve_cftoc(&arm, &cfg, &heavy, &q0, &u_prev, &targets, None).unwrap();
    assert!(tracking_term(&b, &targets) <= tracking_term(&a, &targets) + 1e-15);
}

#[test]
fn warm_and_cold_starts_agree() {
    let arm = Manipulator::new(DhParameters::ur10e());
    let cfg = NmpcConfig::new(NmpcSettings::default(), JointLimits::ur10e()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let home = [0.0, -1.2, 1.4, -1.7, -1.5, 0.3];
    let w = WeightMatrices::uniform(1e3, 1e-2, 6).unwrap();
    let mut compared = 0;
    for _ in 0..30 {
        let q0: Vec<f64> = home.iter().map(|h| h + rng.random_range(-0.3..0.3)).collect();
        let p0 = arm.position(&q0);
        let targets: Vec<Vector3<f64>> = (1..=cfg.settings.horizon).map(|k| p0 + Vector3::new(0.0004 * k as f64, 0.0, -0.0002 * k as f64)).collect();
        let cold = solve_cftoc(&arm, &cfg, &w, &q0, &[0.0; 6], &targets, None).unwrap();
        let warm_init: Vec<f64> = (0..cfg.settings.horizon * 6).map(|_| rng.random_range(-0.05..0.05)).collect();
        let warm = solve_cftoc(&arm, &cfg, &w, &q0, &[0.0; 6], &targets, Some(&warm_init)).unwrap();
        if cold.status == SolveStatus::Converged && warm.status == SolveStatus::Converged {
            compared += 1;
            assert!((cold.objective - warm.objective).abs() <= 1e-6 * cold.objective.abs().max(1.0));
        }
    }
    assert!(compared >= 20, "only {compared} instances converged from both starts");
}

#[test]
fn distant_target_saturates_first_input() {
    let arm = Manipulator::new(DhParameters::ur10e());
    let limits = JointLimits::ur10e();
    let cfg = NmpcConfig::new(NmpcSettings::default(), limits.clone()).unwrap();
    let q0 = [0.0, -1.2, 1.4, -1.7, -1.5, 0.3];
    let target = arm.position(&q0) + Vector3::new(0.3, 0.0, 0.0);
    let w = WeightMatrices::uniform(1e6, 1e-6, 6).unwrap();
    let sol = solve_cftoc(&arm, &cfg, &w, &q0, &[0.0; 6], &vec![target; cfg.settings.horizon], None).unwrap();
    let u = sol.first_input();
    assert!((0..6).any(|i| u[i] == limits.qdot_max[i] || u[i] == limits.qdot_min[i]), "{u:?}");
}

#[test]
fn weight_bounds_at_construction() {
    let arm = Manipulator::new(DhParameters::ur10e());
    let cfg = NmpcConfig::new(NmpcSettings::default(), JointLimits::ur10e()).unwrap();
    assert!(Controller::new(&arm, cfg.clone(), WeightMatrices::identity(6)).is_ok());
    assert!(Controller::new(&arm, cfg.clone(), WeightMatrices::uniform(1e6, 1e-6, 6).unwrap()).is_ok());
    assert!(Controller::new(&arm, cfg.clone(), WeightMatrices::uniform(1.0, 1e-5, 6).unwrap()).is_ok());
    let err = Controller::new(&arm, cfg.clone(), WeightMatrices::uniform(1e7, 1.0, 6).unwrap()).unwrap_err();
    assert!(matches!(err, NmpcError::OutOfBounds { name: "Q", .. }));
    let err = Controller::new(&arm, cfg, WeightMatrices::uniform(1.0, 1e-7, 6).unwrap()).unwrap_err();
    assert!(matches!(err, NmpcError::OutOfBounds { name: "R", .. }));
    assert!(WeightMatrices::uniform(0.0, 1.0, 6).is_err());
}

#[test]
fn invalid_settings_are_rejected() {
    let limits = JointLimits::ur10e();
    let bad = [
        NmpcSettings { horizon: 0, ..Default::default() },
        NmpcSettings { ts_s: 0.0, ..Default::default() },
        NmpcSettings { kkt_tol: -1.0, ..Default::default() },
    ];
    for s in bad {
        assert!(NmpcConfig::new(s, limits.clone()).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_are_feasible_and_descend(
        dq in prop::array::uniform6(-0.5f64..0.5),
        offset in prop::array::uniform3(-0.2f64..0.2),
        log_q in 0.0f64..6.0,
        log_r in -6.0f64..0.0,
    ) {
        let arm = Manipulator::new(DhParameters::ur10e());
        let limits = JointLimits::ur10e();
        let cfg = NmpcConfig::new(NmpcSettings::default(), limits.clone()).unwrap();
        let home = [0.0, -1.2, 1.4, -1.7, -1.5, 0.3];
        let q0: Vec<f64> = home.iter().zip(dq).map(|(h, d)| h + d).collect();
        let target = arm.position(&q0) + Vector3::from(offset);
        let w = WeightMatrices::uniform(10f64.powf(log_q), 10f64.powf(log_r), 6).unwrap();
        let sol = solve_cftoc(&arm, &cfg, &w, &q0, &[0.0; 6], &vec![target; cfg.settings.horizon], None).unwrap();
        for k in 0..cfg.settings.horizon {
            for i in 0..6 {
                let u = sol.inputs[(k, i)];
                prop_assert!(limits.qdot_min[i] <= u && u <= limits.qdot_max[i]);
                let q = sol.predicted_q[(k, i)];
                prop_assert!(limits.q_min[i] - 1e-8 <= q && q <= limits.q_max[i] + 1e-8);
            }
        }
        for pair in sol.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
    }
}
