#![allow(dead_code)]

pub mod criteria;

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, Vector3};
use nmpc_tuner::harness::ExperimentConfig;
use nmpc_tuner::kpi::KpiError;
use nmpc_tuner::nmpc::KinematicModel;
use nmpc_tuner::robot::JointLimits;
use nmpc_tuner::tuner::{Evaluation, TunerError, WeightVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Prismatic chain with `p = C q`.
pub struct LinearArm {
    pub c: DMatrix<f64>,
}

impl KinematicModel for LinearArm {
    fn dof(&self) -> usize {
        self.c.ncols()
    }
    fn position(&self, q: &[f64]) -> Vector3<f64> {
        let p = &self.c * DVector::from_column_slice(q);
        Vector3::new(p[0], p[1], p[2])
    }
    fn position_jacobian(&self, _q: &[f64]) -> DMatrix<f64> {
        self.c.clone()
    }
}

pub fn wide_limits(n: usize, v: f64) -> JointLimits {
    JointLimits::new(
        DVector::from_element(n, -1e3),
        DVector::from_element(n, 1e3),
        DVector::from_element(n, -v),
        DVector::from_element(n, v),
    )
    .unwrap()
}

/// Minimizer of the unconstrained linear tracking problem from its normal
/// equations, assembled row by row and solved with LU.
pub fn lq_oracle(
    c: &DMatrix<f64>,
    q0: &[f64],
    u_prev: &[f64],
    targets: &[Vector3<f64>],
    qw: [f64; 3],
    rw: &[f64],
    ts: f64,
) -> DVector<f64> {
    let n = c.ncols();
    let nh = targets.len();
    let dim = n * nh;
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let p0 = c * DVector::from_column_slice(q0);
    for (k, target) in targets.iter().enumerate() {
        for a in 0..3 {
            let s = qw[a].sqrt();
            let mut row = DVector::zeros(dim);
            for j in 0..=k {
                for i in 0..n {
                    row[j * n + i] = s * ts * c[(a, i)];
                }
            }
            rows.push((row, s * (target[a] - p0[a])));
        }
        for i in 0..n {
            let s = rw[i].sqrt();
            let mut row = DVector::zeros(dim);
            row[k * n + i] = s;
            let mut rhs = 0.0;
            if k == 0 {
                rhs = s * u_prev[i];
            } else {
                row[(k - 1) * n + i] = -s;
            }
            rows.push((row, rhs));
        }
    }
    let a = DMatrix::from_fn(rows.len(), dim, |r, col| rows[r].0[col]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    ata.lu().solve(&atb).expect("normal equations are regular")
}

/// `e(w) = A (w - w_star)`.
pub fn affine_rollout(
    a: DMatrix<f64>,
    w_star: Vec<f64>,
) -> impl Fn(&WeightVector) -> Result<Evaluation, TunerError> + Sync {
    move |w: &WeightVector| {
        let d = DVector::from_vec(w.values.clone()) - DVector::from_vec(w_star.clone());
        let e = &a * d;
        Ok(Evaluation::from_error(KpiError([e[0], e[1], e[2], e[3]])))
    }
}

/// Minimizer of `|e + S x|^2_alpha + |x|^2_beta` as a stacked least-squares
/// problem solved by QR.
pub fn stacked_update(e: &KpiError, s: &DMatrix<f64>, alpha: &[f64; 4], beta: &[f64]) -> DVector<f64> {
    let nw = s.ncols();
    let mut a = DMatrix::zeros(4 + nw, nw);
    let mut b = DVector::zeros(4 + nw);
    for i in 0..4 {
        let sa = alpha[i].sqrt();
        for j in 0..nw {
            a[(i, j)] = sa * s[(i, j)];
        }
        b[i] = -sa * e.0[i];
    }
    for j in 0..nw {
        a[(4 + j, j)] = beta[j].sqrt();
    }
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    qr.r().solve_upper_triangular(&qtb).expect("full column rank")
}

/// Random update instance: `(e, S, alpha, beta)`.
pub fn random_update_instance<R: Rng>(rng: &mut R, nw: usize) -> (KpiError, DMatrix<f64>, [f64; 4], Vec<f64>) {
    let e = KpiError(std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)));
    let s = DMatrix::from_fn(4, nw, |_, _| rng.sample::<f64, _>(StandardNormal));
    let alpha = std::array::from_fn(|_| rng.random_range(0.0..10.0));
    let beta = (0..nw).map(|_| rng.random_range(0.01..2.0)).collect();
    (e, s, alpha, beta)
}

pub fn random_unit_ball<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    let d = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let r: f64 = rng.random_range(0.0..1.0);
    d.normalize() * r
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Shipped experiment config with outputs redirected to `out`.
pub fn experiment_config(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_path(repo_root().join("configs/experiment.json")).expect("shipped config loads");
    cfg.output_dir = out.to_path_buf();
    cfg
}
