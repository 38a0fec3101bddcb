//! Acceptance checks. Each returns a one-line summary on success and the
//! reason on failure.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use nmpc_tuner::bo::{bo_minimize, matern52_ard, BoConfig};
use nmpc_tuner::harness::{cmd_tune, Experiment, HarnessError};
use nmpc_tuner::kpi::{compute_report, normalize, KpiReport, KpiTargets, LogSample, RepetitionLog};
use nmpc_tuner::nmpc::{solve_cftoc, KinematicModel, NmpcConfig, NmpcSettings, WeightMatrices};
use nmpc_tuner::robot::{
    forward_kinematics, inverse_kinematics, position_jacobian, DhParameters, JointLimits, JointState, Manipulator,
};
use nmpc_tuner::tuner::{
    norm_optimal_update, run_tuning, update_objective, ConvergenceTest, TunerConfig, TuningHistory, WeightLayout,
    WeightVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{affine_rollout, experiment_config, lq_oracle, random_unit_ball, random_update_instance, stacked_update, wide_limits, LinearArm};

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(started: Instant, limit_s: f64) -> Result<f64, String> {
    let t = started.elapsed().as_secs_f64();
    ensure(t < limit_s, || format!("took {t:.2} s, limit {limit_s} s"))?;
    Ok(t)
}

pub fn closed_form_update() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_rel: f64 = 0.0;
    for nw in [2usize, 9] {
        for inst in 0..1000 {
            let (e, s, alpha, beta) = random_update_instance(&mut rng, nw);
            let dw = norm_optimal_update(&e, &s, &alpha, &beta);
            let oracle = stacked_update(&e, &s, &alpha, &beta);
            let rel = (&dw - &oracle).norm() / oracle.norm();
            worst_rel = worst_rel.max(rel);
            ensure(rel <= 1e-10, || format!("n_w {nw} instance {inst}: relative error {rel:e}"))?;
            let f0 = update_objective(&e, &s, &alpha, &beta, &dw);
            for _ in 0..1000 {
                let pert = &dw + random_unit_ball(&mut rng, nw);
                let f = update_objective(&e, &s, &alpha, &beta, &pert);
                ensure(f >= f0, || format!("n_w {nw} instance {inst}: perturbation lowers objective {f0} -> {f}"))?;
            }
        }
    }
    let t = within_time(started, 5.0)?;
    Ok(format!("2000 instances, max relative error {worst_rel:.2e}, {t:.2} s"))
}

/// Contraction factor of the log-weight error under exact sensitivity and
/// the eigenvector of its slowest mode.
pub fn contraction(a: &DMatrix<f64>, alpha: &[f64; 4], beta: &[f64]) -> (f64, DVector<f64>) {
    let nw = a.ncols();
    let al = DMatrix::from_diagonal(&DVector::from_column_slice(alpha));
    let h = a.transpose() * &al * a;
    let g = &h + DMatrix::from_diagonal(&DVector::from_column_slice(beta));
    let ge = SymmetricEigen::new(g);
    let g_inv_sqrt = &ge.eigenvectors
        * DMatrix::from_diagonal(&ge.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * ge.eigenvectors.transpose();
    let sym = &g_inv_sqrt * h * &g_inv_sqrt;
    let se = SymmetricEigen::new(sym);
    let (imin, lmin) = se.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let x = (&g_inv_sqrt * se.eigenvectors.column(imin)).normalize();
    debug_assert!(nw == x.len());
    (1.0 - lmin, x)
}

pub fn affine_convergence() -> Outcome {
    let started = Instant::now();
    let a = DMatrix::from_row_slice(4, 2, &[0.9, 0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2]);
    let alpha = [10.0, 1.0, 1.0, 5.0];
    let beta = vec![4.0, 4.0];
    let (rho, x) = contraction(&a, &alpha, &beta);
    ensure(rho > 0.0 && rho < 1.0, || format!("contraction factor {rho} outside (0, 1)"))?;
    let w_star = vec![3.0, -3.0];
    let w0: Vec<f64> = w_star.iter().zip(x.iter()).map(|(s, d)| s - 2.0 * d).collect();
    let cfg = TunerConfig {
        alpha,
        beta: beta.clone(),
        delta: vec![0.5],
        epsilon: 0.05,
        ell_max: 200,
        refresh_every: None,
        convergence: ConvergenceTest::Norm,
        layout: WeightLayout::Shared,
    };
    let rollout = affine_rollout(a, w_star.clone());
    let w0 = WeightVector::new(w0, WeightLayout::Shared, 6).map_err(|e| e.to_string())?;
    let h = run_tuning(&cfg, &rollout, &w0).map_err(|e| e.to_string())?;
    ensure(h.converged, || "did not reach |e| <= 0.05".into())?;
    let norms: Vec<f64> = h.entries.iter().map(|e| e.error_norm).collect();
    for (l, pair) in norms.windows(2).enumerate() {
        let ratio = pair[1] / pair[0];
        ensure((ratio - rho).abs() <= 1e-6, || format!("repetition {}: decay ratio {ratio}, expected {rho}", l + 2))?;
    }
    let predicted = 1 + ((0.05 / norms[0]).ln() / rho.ln()).ceil() as usize;
    let achieved = h.entries.len();
    ensure(achieved.abs_diff(predicted) <= 1, || format!("{achieved} repetitions, predicted {predicted}"))?;
    let dist = h.final_weights.values.iter().zip(&w_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let t = within_time(started, 1.0)?;
    Ok(format!(
        "rho {rho:.4}, {achieved} repetitions (predicted {predicted}), final |w - w*| {dist:.2e}, {t:.3} s"
    ))
}

/// Outputs of one `tune` run on the shipped experiment.
pub struct TuneRun {
    pub dir: tempfile::TempDir,
    pub history: TuningHistory,
    pub kpi_csv: Vec<u8>,
    pub seconds: f64,
    pub result: Result<(), String>,
}

pub fn run_tune() -> Result<TuneRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = experiment_config(dir.path());
    let started = Instant::now();
    let result = match cmd_tune(&cfg, false) {
        Ok(()) => Ok(()),
        Err(e @ HarnessError::NotConverged { .. }) => Err(e.to_string()),
        Err(e) => return Err(e.to_string()),
    };
    let seconds = started.elapsed().as_secs_f64();
    let history: TuningHistory = serde_json::from_reader(BufReader::new(
        File::open(dir.path().join("tune/history.json")).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    let kpi_csv = std::fs::read(dir.path().join("tune/kpi.csv")).map_err(|e| e.to_string())?;
    Ok(TuneRun { dir, history, kpi_csv, seconds, result })
}

fn report(h: &TuningHistory, i: usize) -> Result<KpiReport, String> {
    h.entries[i].report.ok_or_else(|| format!("repetition {} has no KPI report", i + 1))
}

pub fn protocol_reproduction(run: &TuneRun) -> Outcome {
    let h = &run.history;
    run.result.clone()?;
    ensure(h.converged && h.entries.len() <= 10, || format!("not converged in {} repetitions", h.entries.len()))?;
    let first = report(h, 0)?;
    let last = report(h, h.entries.len() - 1)?;
    ensure(last.rmse <= 1e-3 && last.max_ee <= 2e-3 && last.rms_du <= 0.025, || format!("final KPIs {last:?} miss a target"))?;
    ensure(last.rmse <= 0.5 * first.rmse, || format!("final RMSE {} > half of repetition-1 RMSE {}", last.rmse, first.rmse))?;
    let (e0, el) = (&h.entries[0], h.entries.last().expect("non-empty"));
    ensure(e0.q_diag == [1.0; 3] && e0.r_diag.iter().all(|&r| r == 1.0), || "repetition 1 is not identity-weighted".into())?;
    ensure(el.q_diag.iter().all(|&q| q > 1.0), || format!("final Q {:?} not above identity", el.q_diag))?;
    ensure(el.r_diag.iter().all(|&r| r < 1.0), || format!("final R {:?} not below identity", el.r_diag))?;
    ensure(run.seconds < 300.0, || format!("took {:.1} s", run.seconds))?;
    Ok(format!(
        "converged in {} repetitions, RMSE {:.3} -> {:.3} mm, max {:.3} mm, RMS du {:.2e} rad/s, Q {:.3}, R {:.3e}, {:.1} s",
        h.entries.len(),
        first.rmse * 1e3,
        last.rmse * 1e3,
        last.max_ee * 1e3,
        last.rms_du,
        el.q_diag[0],
        el.r_diag[0],
        run.seconds
    ))
}

pub fn bo_parity(run: &TuneRun) -> Outcome {
    let h = &run.history;
    let tuned = report(h, h.entries.len() - 1)?;
    let started = Instant::now();
    let cfg = experiment_config(run.dir.path());
    let exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
    let bo = exp.bo().map_err(|e| e.to_string())?;
    let t = within_time(started, 3600.0)?;
    let best = bo.best_report().ok_or("BO best evaluation has no report")?;
    let n_w = h.final_weights.len();
    let rel = (tuned.rmse - best.rmse).abs() / best.rmse;
    let summary = format!(
        "tuner RMSE {:.4} mm with {} rollouts, BO RMSE {:.4} mm with {} evaluations (best at {}), relative gap {:.1}%, BO {t:.1} s",
        tuned.rmse * 1e3,
        h.rollouts,
        best.rmse * 1e3,
        bo.result.history.len(),
        bo.result.best_eval,
        rel * 100.0
    );
    ensure(bo.result.history.len() == 100, || format!("BO ran {} evaluations", bo.result.history.len()))?;
    ensure(h.rollouts <= 10 + n_w + 1, || format!("{summary}; rollout budget exceeded"))?;
    ensure(rel <= 0.10, || summary.clone())?;
    Ok(summary)
}

pub fn nmpc_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let settings = NmpcSettings::default();
    let nh = settings.horizon;

    // Unconstrained linear toy.
    let toy = LinearArm { c: DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]) };
    let toy_cfg = NmpcConfig::new(settings.clone(), wide_limits(1, 1e3)).map_err(|e| e.to_string())?;
    let mut worst_lq: f64 = 0.0;
    for inst in 0..200 {
        let q0 = [rng.random_range(-0.5..0.5)];
        let u_prev = [rng.random_range(-0.2..0.2)];
        let targets: Vec<Vector3<f64>> = (0..nh).map(|_| Vector3::new(q0[0] + rng.random_range(-0.05..0.05), 0.0, 0.0)).collect();
        let qw = [10f64.powf(rng.random_range(0.0..4.0)), 1.0, 1.0];
        let rw = vec![10f64.powf(rng.random_range(-4.0..0.0))];
        let w = WeightMatrices::new(qw, rw.clone()).map_err(|e| e.to_string())?;
        let sol = solve_cftoc(&toy, &toy_cfg, &w, &q0, &u_prev, &targets, None).map_err(|e| e.to_string())?;
        let oracle = lq_oracle(&toy.c, &q0, &u_prev, &targets, qw, &rw, settings.ts_s);
        let got = DVector::from_column_slice(sol.inputs.transpose().as_slice());
        let err = (&got - &oracle).norm() / oracle.norm().max(1.0);
        worst_lq = worst_lq.max(err);
        ensure(err <= 1e-6, || format!("LQ instance {inst}: relative error {err:e}"))?;
    }

    // Constrained instances on the arm.
    let arm = Manipulator::new(DhParameters::ur10e());
    let limits = JointLimits::ur10e();
    let arm_cfg = NmpcConfig::new(settings.clone(), limits.clone()).map_err(|e| e.to_string())?;
    let home = [0.0, -1.2, 1.4, -1.7, -1.5, 0.3];
    let mut saturated = 0;
    for inst in 0..100 {
        let q0: Vec<f64> = home.iter().map(|h| h + rng.random_range(-0.3..0.3)).collect();
        let p0 = arm.position(&q0);
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let targets = vec![p0 + dir * rng.random_range(0.1..0.3); nh];
        let w = WeightMatrices::new([1e6; 3], vec![1e-6; 6]).map_err(|e| e.to_string())?;
        let sol = solve_cftoc(&arm, &arm_cfg, &w, &q0, &[0.0; 6], &targets, None).map_err(|e| e.to_string())?;
        for k in 0..nh {
            for i in 0..6 {
                let u = sol.inputs[(k, i)];
                ensure(u >= limits.qdot_min[i] && u <= limits.qdot_max[i], || {
                    format!("constrained instance {inst}: u[{k},{i}] = {u} outside bounds")
                })?;
            }
        }
        if (0..6).any(|i| sol.inputs[(0, i)] == limits.qdot_max[i] || sol.inputs[(0, i)] == limits.qdot_min[i]) {
            saturated += 1;
        }
    }
    ensure(saturated > 0, || "no constrained instance reached a velocity bound".into())?;

    // Monotone accepted steps.
    let mut steps = 0usize;
    for inst in 0..1000 {
        let q0: Vec<f64> = home.iter().map(|h| h + rng.random_range(-1.0..1.0)).collect();
        let p0 = arm.position(&q0);
        let targets: Vec<Vector3<f64>> = (0..nh)
            .map(|_| p0 + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        let q = 10f64.powf(rng.random_range(0.0..6.0));
        let r = 10f64.powf(rng.random_range(-6.0..0.0));
        let w = WeightMatrices::uniform(q, r, 6).map_err(|e| e.to_string())?;
        let u_prev: Vec<f64> = (0..6).map(|i| rng.random_range(-0.5..0.5) * limits.qdot_max[i]).collect();
        let sol = solve_cftoc(&arm, &arm_cfg, &w, &q0, &u_prev, &targets, None).map_err(|e| format!("fuzz instance {inst}: {e}"))?;
        for pair in sol.objective_trace.windows(2) {
            ensure(pair[1] <= pair[0], || format!("fuzz instance {inst}: objective rose {} -> {}", pair[0], pair[1]))?;
        }
        steps += sol.objective_trace.len() - 1;
    }
    let t = within_time(started, 30.0)?;
    Ok(format!(
        "LQ max relative error {worst_lq:.2e}, {saturated}/100 constrained solves saturate within bounds, {steps} monotone steps over 1000 fuzz solves, {t:.2} s"
    ))
}

pub fn kinematics() -> Outcome {
    let started = Instant::now();
    let dh = DhParameters::ur10e();
    let limits = JointLimits::ur10e();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    let mut worst_j: f64 = 0.0;
    for _ in 0..100 {
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let j = position_jacobian(&dh, &JointState::from_slice(&q));
        for c in 0..6 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[c] += h;
            qm[c] -= h;
            let fd = (forward_kinematics(&dh, &JointState::from_slice(&qp)).p
                - forward_kinematics(&dh, &JointState::from_slice(&qm)).p)
                / (2.0 * h);
            for r in 0..3 {
                worst_j = worst_j.max((j[(r, c)] - fd[r]).abs());
            }
        }
    }
    ensure(worst_j <= 1e-6, || format!("Jacobian differs from finite differences by {worst_j:e}"))?;
    let mut worst_ik: f64 = 0.0;
    for inst in 0..100 {
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target = forward_kinematics(&dh, &JointState::from_slice(&q)).p;
        let seed: Vec<f64> = q.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let sol = inverse_kinematics(&dh, &target, &JointState::from_slice(&seed), &limits)
            .map_err(|e| format!("IK target {inst}: {e}"))?;
        let err = (forward_kinematics(&dh, &sol).p - target).norm();
        worst_ik = worst_ik.max(err);
        ensure(err <= 1e-6, || format!("IK target {inst}: residual {err:e} m"))?;
    }
    let t = within_time(started, 5.0)?;
    Ok(format!("max |J - J_fd| {worst_j:.2e}, max FK(IK) residual {worst_ik:.2e} m, {t:.3} s"))
}

fn sample(u: Vec<f64>, p: Vector3<f64>, p_ref: Vector3<f64>, t: f64) -> LogSample {
    LogSample { t, q: vec![0.0; u.len()], u, p, p_ref, telemetry: Default::default() }
}

pub fn kpi_cases() -> Outcome {
    let started = Instant::now();
    let targets = KpiTargets::default();
    let base = KpiReport { rmse: 1e-3, rms_du: 0.025, sat_ratio: 0.05, max_ee: 2e-3 };
    let e = normalize(&base, &targets);
    ensure(e.0.iter().all(|v| v.abs() <= 1e-15), || format!("metrics at target give {:?}", e.0))?;
    let doubled = KpiReport { rmse: 2e-3, rms_du: 0.05, sat_ratio: 0.1, max_ee: 4e-3 };
    let e = normalize(&doubled, &targets);
    ensure(e.0.iter().all(|v| (v - 1.0).abs() <= 1e-15), || format!("doubled metrics give {:?}", e.0))?;
    let half = KpiReport { rmse: 0.5e-3, ..base };
    let e = normalize(&half, &targets);
    ensure((e.0[0] + 0.5).abs() <= 1e-15, || format!("half RMSE gives {}", e.0[0]))?;

    let limits = JointLimits::ur10e();
    let vmax: Vec<f64> = limits.qdot_max.iter().copied().collect();
    let z = Vector3::zeros();
    let mut full = RepetitionLog::new(0.008);
    let mut mixed = RepetitionLog::new(0.008);
    let mut near = RepetitionLog::new(0.008);
    for k in 0..8 {
        let t = k as f64 * 0.008;
        let mut u = vec![0.0; 6];
        u[0] = vmax[0];
        full.samples.push(sample(u.clone(), z, z, t));
        let mut m = vec![0.0; 6];
        if k % 4 == 0 {
            m[3] = -vmax[3];
        }
        mixed.samples.push(sample(m, z, z, t));
        let mut n = vec![0.0; 6];
        n[2] = if k < 2 { 0.995 * vmax[2] } else { 0.98 * vmax[2] };
        near.samples.push(sample(n, z, z, t));
    }
    let sat = |log: &RepetitionLog| compute_report(log, &limits, 0.01).map(|r| r.sat_ratio).map_err(|e| e.to_string());
    ensure(sat(&full)? == 1.0, || "full saturation is not 1".into())?;
    ensure(sat(&mixed)? == 0.25, || "two of eight saturated steps is not 0.25".into())?;
    ensure(sat(&near)? == 0.25, || "tolerance band classification is off".into())?;
    let t = within_time(started, 1.0)?;
    Ok(format!("substitution and saturation cases exact, {:.1} ms", t * 1e3))
}

pub fn bo_component() -> Outcome {
    let started = Instant::now();
    let k = matern52_ard(&[0.0], &[1.0], &[1.0], 1.0);
    ensure((k - 0.5239941088318203).abs() <= 1e-6, || format!("unit-distance kernel value {k}"))?;
    let cfg = BoConfig { bounds: vec![[-1.0, 1.0]], budget: 30, init_design: 5, seed: 3, ..BoConfig::default() };
    let res = bo_minimize(|x: &[f64]| Ok::<_, String>((x[0] - 0.3).powi(2)), &cfg).map_err(|e| e.to_string())?;
    let dist = (res.best_x[0] - 0.3).abs();
    ensure(dist <= 1e-2, || format!("best point {} is {dist:e} from 0.3", res.best_x[0]))?;
    for pair in res.history.windows(2) {
        ensure(pair[1].best_so_far <= pair[0].best_so_far, || "best-so-far increased".into())?;
    }
    let t = within_time(started, 60.0)?;
    Ok(format!("kernel(1) = {k:.8}, best x {:.5} (|dx| {dist:.1e}) after 30 evaluations, {t:.2} s", res.best_x[0]))
}

pub fn determinism(run: &TuneRun) -> Outcome {
    let second = run_tune()?;
    ensure(second.kpi_csv == run.kpi_csv, || "KPI CSVs differ between runs".into())?;
    let hist = |dir: &Path| std::fs::read(dir.join("tune/history.csv")).map_err(|e| e.to_string());
    ensure(hist(run.dir.path())? == hist(second.dir.path())?, || "history CSVs differ between runs".into())?;
    Ok(format!("{} bytes of KPI CSV identical across two runs", run.kpi_csv.len()))
}
