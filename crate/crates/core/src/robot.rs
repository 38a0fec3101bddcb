//! Kinematic model of a 6-DOF serial manipulator.
//!
//! Standard Denavit-Hartenberg convention: each link transform is
//! `Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)` with `theta = q_j + theta_offset`.
//! The plant is the kinematic integrator `q' = clamp(q + Ts * qdot)`.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmpc::KinematicModel;

/// Number of joints of the manipulator.
pub const DOF: usize = 6;

#[derive(Debug, Error)]
pub enum RobotError {
    #[error("DH table must have exactly 6 rows, got {0}")]
    RowCount(usize),
    #[error("DH table entry at row {row} is not finite")]
    NonFinite { row: usize },
    #[error("invalid joint limits: {0}")]
    InvalidLimits(String),
    #[error("inverse kinematics did not converge: residual {residual:.3e} m after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("failed to read DH table: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse DH table: {0}")]
    Csv(#[from] csv::Error),
}

/// One row of a DH table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    /// Link length [m].
    pub a: f64,
    /// Link twist [rad].
    pub alpha: f64,
    /// Link offset [m].
    pub d: f64,
    /// Constant added to the joint angle [rad].
    pub theta_offset: f64,
}

impl DhRow {
    pub const fn new(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self { a, alpha, d, theta_offset }
    }

    /// Homogeneous transform of this link for joint angle `q`.
    pub fn transform(&self, q: f64) -> Matrix4<f64> {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        Matrix4::new(
            ct, -st * ca, st * sa, self.a * ct, //
            st, ct * ca, -ct * sa, self.a * st, //
            0.0, sa, ca, self.d, //
            0.0, 0.0, 0.0, 1.0,
        )
    }
}

/// Validated six-row DH table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DhRow>", into = "Vec<DhRow>")]
pub struct DhParameters {
    rows: [DhRow; DOF],
}

impl TryFrom<Vec<DhRow>> for DhParameters {
    type Error = RobotError;

    fn try_from(rows: Vec<DhRow>) -> Result<Self, Self::Error> {
        let n = rows.len();
        let rows: [DhRow; DOF] = rows.try_into().map_err(|_| RobotError::RowCount(n))?;
        Self::new(rows)
    }
}

impl From<DhParameters> for Vec<DhRow> {
    fn from(dh: DhParameters) -> Self {
        dh.rows.to_vec()
    }
}

impl DhParameters {
    pub fn new(rows: [DhRow; DOF]) -> Result<Self, RobotError> {
        for (row, r) in rows.iter().enumerate() {
            if ![r.a, r.alpha, r.d, r.theta_offset].iter().all(|v| v.is_finite()) {
                return Err(RobotError::NonFinite { row });
            }
        }
        Ok(Self { rows })
    }

    /// Published nominal DH table of the UR10e.
    pub fn ur10e() -> Self {
        use std::f64::consts::FRAC_PI_2;
        Self {
            rows: [
                DhRow::new(0.0, FRAC_PI_2, 0.1807, 0.0),
                DhRow::new(-0.6127, 0.0, 0.0, 0.0),
                DhRow::new(-0.57155, 0.0, 0.0, 0.0),
                DhRow::new(0.0, FRAC_PI_2, 0.17415, 0.0),
                DhRow::new(0.0, -FRAC_PI_2, 0.11985, 0.0),
                DhRow::new(0.0, 0.0, 0.11655, 0.0),
            ],
        }
    }

    /// Reads a CSV table with header `a,alpha,d,theta_offset`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, RobotError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let rows = rdr.deserialize::<DhRow>().collect::<Result<Vec<_>, _>>()?;
        Self::try_from(rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, RobotError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn rows(&self) -> &[DhRow; DOF] {
        &self.rows
    }

    /// Base frame followed by the frame of every link, `frames[j]` = T_j^0.
    pub fn frames(&self, q: &JointState) -> [Matrix4<f64>; DOF + 1] {
        let mut frames = [Matrix4::identity(); DOF + 1];
        for (j, row) in self.rows.iter().enumerate() {
            frames[j + 1] = frames[j] * row.transform(q.0[j]);
        }
        frames
    }

    /// Base-to-flange homogeneous transform.
    pub fn end_effector_transform(&self, q: &JointState) -> Matrix4<f64> {
        self.rows
            .iter()
            .zip(q.0.iter())
            .fold(Matrix4::identity(), |t, (row, &qj)| t * row.transform(qj))
    }
}

/// Joint angles [rad].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState(pub Vector6<f64>);

/// Joint velocities [rad/s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointCommand(pub Vector6<f64>);

impl JointState {
    pub fn zeros() -> Self {
        Self(Vector6::zeros())
    }

    pub fn from_slice(q: &[f64]) -> Self {
        Self(Vector6::from_column_slice(q))
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.0.as_slice())
    }
}

impl JointCommand {
    pub fn zeros() -> Self {
        Self(Vector6::zeros())
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self(Vector6::from_column_slice(u))
    }
}

/// End-effector position and ZYZ Euler orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EePose {
    pub p: Vector3<f64>,
    pub phi: Vector3<f64>,
}

/// Position and velocity box limits, one entry per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointLimitsRaw")]
pub struct JointLimits {
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    pub qdot_min: DVector<f64>,
    pub qdot_max: DVector<f64>,
}

#[derive(Deserialize)]
struct JointLimitsRaw {
    q_min: Vec<f64>,
    q_max: Vec<f64>,
    qdot_min: Vec<f64>,
    qdot_max: Vec<f64>,
}

impl TryFrom<JointLimitsRaw> for JointLimits {
    type Error = RobotError;

    fn try_from(raw: JointLimitsRaw) -> Result<Self, Self::Error> {
        JointLimits::new(
            DVector::from_vec(raw.q_min),
            DVector::from_vec(raw.q_max),
            DVector::from_vec(raw.qdot_min),
            DVector::from_vec(raw.qdot_max),
        )
    }
}

impl JointLimits {
    pub fn new(
        q_min: DVector<f64>,
        q_max: DVector<f64>,
        qdot_min: DVector<f64>,
        qdot_max: DVector<f64>,
    ) -> Result<Self, RobotError> {
        let n = q_min.len();
        if n == 0 || q_max.len() != n || qdot_min.len() != n || qdot_max.len() != n {
            return Err(RobotError::InvalidLimits("length mismatch".into()));
        }
        for i in 0..n {
            if !(q_min[i] < q_max[i]) {
                return Err(RobotError::InvalidLimits(format!("q_min >= q_max on joint {}", i + 1)));
            }
            if !(qdot_min[i] < 0.0 && 0.0 < qdot_max[i]) {
                return Err(RobotError::InvalidLimits(format!(
                    "velocity range must contain zero strictly on joint {}",
                    i + 1
                )));
            }
        }
        Ok(Self { q_min, q_max, qdot_min, qdot_max })
    }

    /// UR10e ranges: ±2π on every joint except the elbow (±π);
    /// 120 °/s on base and shoulder, 180 °/s elsewhere.
    pub fn ur10e() -> Self {
        use std::f64::consts::{PI, TAU};
        let q_max = DVector::from_vec(vec![TAU, TAU, PI, TAU, TAU, TAU]);
        let v_max = DVector::from_vec(vec![
            2.0 * PI / 3.0,
            2.0 * PI / 3.0,
            PI,
            PI,
            PI,
            PI,
        ]);
        Self::new(-q_max.clone(), q_max, -v_max.clone(), v_max).expect("static limits are valid")
    }

    pub fn dof(&self) -> usize {
        self.q_min.len()
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter()
            .enumerate()
            .all(|(i, &v)| self.q_min[i] <= v && v <= self.q_max[i])
    }
}

/// ZYZ Euler angles of a rotation matrix.
pub fn zyz_euler(r: &Matrix3<f64>) -> Vector3<f64> {
    let sb = (r[(0, 2)].powi(2) + r[(1, 2)].powi(2)).sqrt();
    let beta = sb.atan2(r[(2, 2)]);
    if sb > 1e-12 {
        Vector3::new(
            r[(1, 2)].atan2(r[(0, 2)]),
            beta,
            r[(2, 1)].atan2(-r[(2, 0)]),
        )
    } else if r[(2, 2)] > 0.0 {
        // beta = 0: only alpha + gamma is observable
        Vector3::new(0.0, 0.0, r[(1, 0)].atan2(r[(0, 0)]))
    } else {
        Vector3::new(0.0, beta, (-r[(1, 0)]).atan2(-r[(0, 0)]))
    }
}

pub fn forward_kinematics(dh: &DhParameters, q: &JointState) -> EePose {
    let t = dh.end_effector_transform(q);
    let rot: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    EePose {
        p: Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]),
        phi: zyz_euler(&rot),
    }
}

/// Geometric position Jacobian: column j is `z_{j-1} x (p - o_{j-1})`.
pub fn position_jacobian(dh: &DhParameters, q: &JointState) -> Matrix3x6<f64> {
    let frames = dh.frames(q);
    let p = frames[DOF].fixed_view::<3, 1>(0, 3).into_owned();
    let mut jac = Matrix3x6::zeros();
    for j in 0..DOF {
        let z = frames[j].fixed_view::<3, 1>(0, 2).into_owned();
        let o = frames[j].fixed_view::<3, 1>(0, 3).into_owned();
        jac.set_column(j, &z.cross(&(p - o)));
    }
    jac
}

/// Damped-least-squares settings for [`inverse_kinematics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkOptions {
    pub damping: f64,
    pub max_iters: usize,
    /// Position tolerance [m].
    pub tol: f64,
    /// Largest joint-space step per iteration [rad].
    pub max_step: f64,
    /// Weights of the joint-displacement norm used to rank converged runs.
    pub joint_weights: [f64; DOF],
    /// Extra runs from perturbed seeds when the plain run fails.
    pub restarts: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iters: 200,
            tol: 1e-7,
            max_step: 0.5,
            joint_weights: [1.0; DOF],
            restarts: 8,
        }
    }
}

pub fn inverse_kinematics(
    dh: &DhParameters,
    target_p: &Vector3<f64>,
    seed: &JointState,
    limits: &JointLimits,
) -> Result<JointState, RobotError> {
    inverse_kinematics_with(dh, target_p, seed, limits, &IkOptions::default())
}

pub fn inverse_kinematics_with(
    dh: &DhParameters,
    target_p: &Vector3<f64>,
    seed: &JointState,
    limits: &JointLimits,
    opts: &IkOptions,
) -> Result<JointState, RobotError> {
    let seed = clamp_to_limits(seed, limits);
    if (forward_kinematics(dh, &seed).p - target_p).norm() <= opts.tol {
        return Ok(seed);
    }

    let weighted_dist = |q: &JointState| -> f64 {
        (0..DOF)
            .map(|i| opts.joint_weights[i] * (q.0[i] - seed.0[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let mut best: Option<JointState> = None;
    let mut worst_residual = f64::INFINITY;
    // Deterministic perturbations of the shoulder/elbow/wrist-1 joints.
    for attempt in 0..=opts.restarts {
        let mut start = seed;
        if attempt > 0 {
            let sign = if attempt % 2 == 1 { 1.0 } else { -1.0 };
            let mag = 0.3 * attempt.div_ceil(2) as f64;
            start.0[1] += sign * mag;
            start.0[2] -= sign * mag;
            start.0[3] += 0.5 * sign * mag;
            start = clamp_to_limits(&start, limits);
        }
        match dls_run(dh, target_p, &start, limits, opts) {
            Ok(q) => {
                let better = best.is_none_or(|b| weighted_dist(&q) < weighted_dist(&b));
                if better {
                    best = Some(q);
                }
                // A converged run from the seed itself is the nearest branch.
                if attempt == 0 {
                    break;
                }
            }
            Err(res) => worst_residual = worst_residual.min(res),
        }
    }
    best.ok_or(RobotError::NoConvergence {
        residual: worst_residual,
        iterations: opts.max_iters,
    })
}

fn dls_run(
    dh: &DhParameters,
    target_p: &Vector3<f64>,
    start: &JointState,
    limits: &JointLimits,
    opts: &IkOptions,
) -> Result<JointState, f64> {
    let mut q = *start;
    let lambda2 = opts.damping * opts.damping;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let err = target_p - forward_kinematics(dh, &q).p;
        residual = err.norm();
        if residual <= opts.tol {
            return Ok(q);
        }
        let jac = position_jacobian(dh, &q);
        let jjt = jac * jac.transpose() + Matrix3::identity() * lambda2;
        let Some(y) = jjt.cholesky().map(|c| c.solve(&err)) else {
            return Err(residual);
        };
        let mut dq = jac.transpose() * y;
        let n = dq.amax();
        if n > opts.max_step {
            dq *= opts.max_step / n;
        }
        q = clamp_to_limits(&JointState(q.0 + dq), limits);
    }
    let residual_final = (target_p - forward_kinematics(dh, &q).p).norm();
    if residual_final <= opts.tol {
        Ok(q)
    } else {
        Err(residual.min(residual_final))
    }
}

fn clamp_to_limits(q: &JointState, limits: &JointLimits) -> JointState {
    let mut out = *q;
    for i in 0..DOF {
        out.0[i] = out.0[i].clamp(limits.q_min[i], limits.q_max[i]);
    }
    out
}

/// Forward-Euler step of the kinematic plant with hard position clamp.
pub fn plant_step(q: &JointState, u: &JointCommand, ts: f64, limits: &JointLimits) -> JointState {
    debug_assert!(ts > 0.0);
    clamp_to_limits(&JointState(q.0 + u.0 * ts), limits)
}

/// Manipulator model used by the controllers.
#[derive(Debug, Clone)]
pub struct Manipulator {
    pub dh: DhParameters,
}

impl Manipulator {
    pub fn new(dh: DhParameters) -> Self {
        Self { dh }
    }
}

impl KinematicModel for Manipulator {
    fn dof(&self) -> usize {
        DOF
    }

    fn position(&self, q: &[f64]) -> Vector3<f64> {
        forward_kinematics(&self.dh, &JointState::from_slice(q)).p
    }

    fn position_jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let j = position_jacobian(&self.dh, &JointState::from_slice(q));
        DMatrix::from_column_slice(3, DOF, j.as_slice())
    }
}
