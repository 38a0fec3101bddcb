//! Receding-horizon position-tracking NMPC with swappable Q/R weights.

mod qp;
mod solver;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::robot::JointLimits;

pub use qp::solve_box_qp;
pub use solver::{solve_tracking, TrackingCost};

/// Lower/upper bounds on the diagonal entries of Q and R.
pub const Q_MIN: f64 = 1.0;
pub const Q_MAX: f64 = 1e6;
pub const R_MIN: f64 = 1e-6;
pub const R_MAX: f64 = 1.0;

/// Joint-space kinematic chain with a Cartesian position output.
pub trait KinematicModel {
    fn dof(&self) -> usize;
    fn position(&self, q: &[f64]) -> Vector3<f64>;
    /// 3 x dof matrix of partial derivatives of `position`.
    fn position_jacobian(&self, q: &[f64]) -> DMatrix<f64>;
}

impl<T: KinematicModel + ?Sized> KinematicModel for &T {
    fn dof(&self) -> usize {
        (**self).dof()
    }
    fn position(&self, q: &[f64]) -> Vector3<f64> {
        (**self).position(q)
    }
    fn position_jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        (**self).position_jacobian(q)
    }
}

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("weight {name}[{index}] = {value:e} outside [{min:e}, {max:e}]")]
    OutOfBounds {
        name: &'static str,
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("weights must be finite and positive")]
    NonPositiveWeight,
    #[error("line search stalled after {iterations} iterations (KKT residual {kkt_residual:.3e})")]
    SolverStall { iterations: usize, kkt_residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Solver and horizon settings (the `nmpc` section of the experiment config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcSettings {
    pub horizon: usize,
    pub ts_s: f64,
    pub kkt_tol: f64,
    pub max_sqp_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Quadratic penalty on joint-position bound violation.
    pub state_penalty: f64,
}

impl Default for NmpcSettings {
    fn default() -> Self {
        Self {
            horizon: 10,
            ts_s: 0.008,
            kkt_tol: 1e-6,
            max_sqp_iters: 30,
            armijo_c: 1e-4,
            backtrack: 0.5,
            min_step: 1e-8,
            state_penalty: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmpcConfig {
    pub settings: NmpcSettings,
    pub limits: JointLimits,
}

impl NmpcConfig {
    pub fn new(settings: NmpcSettings, limits: JointLimits) -> Result<Self, NmpcError> {
        let s = &settings;
        if s.horizon < 1 {
            return Err(NmpcError::Config("horizon must be >= 1".into()));
        }
        if !(s.ts_s > 0.0) || !(s.kkt_tol > 0.0) {
            return Err(NmpcError::Config("ts_s and kkt_tol must be positive".into()));
        }
        if !(s.backtrack > 0.0 && s.backtrack < 1.0) || !(s.armijo_c > 0.0 && s.armijo_c < 0.5) {
            return Err(NmpcError::Config("line-search parameters out of range".into()));
        }
        Ok(Self { settings, limits })
    }
}

/// Diagonal tracking (Q, 3 entries) and input-rate (R, one per joint) weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrices {
    q: [f64; 3],
    r: Vec<f64>,
}

impl WeightMatrices {
    pub fn new(q: [f64; 3], r: Vec<f64>) -> Result<Self, NmpcError> {
        if q.iter().chain(r.iter()).any(|v| !(v.is_finite() && *v > 0.0)) || r.is_empty() {
            return Err(NmpcError::NonPositiveWeight);
        }
        Ok(Self { q, r })
    }

    pub fn identity(dof: usize) -> Self {
        Self { q: [1.0; 3], r: vec![1.0; dof] }
    }

    pub fn uniform(q: f64, r: f64, dof: usize) -> Result<Self, NmpcError> {
        Self::new([q; 3], vec![r; dof])
    }

    pub fn q(&self) -> &[f64; 3] {
        &self.q
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// Checks every entry against `[Q_MIN, Q_MAX]` and `[R_MIN, R_MAX]`.
    pub fn check_bounds(&self) -> Result<(), NmpcError> {
        let check = |name, vals: &[f64], min: f64, max: f64| {
            for (index, &value) in vals.iter().enumerate() {
                if !(min..=max).contains(&value) {
                    return Err(NmpcError::OutOfBounds { name, index, value, min, max });
                }
            }
            Ok(())
        };
        check("Q", &self.q, Q_MIN, Q_MAX)?;
        check("R", &self.r, R_MIN, R_MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// Projected-gradient KKT residual below `kkt_tol`.
    Converged,
    /// Iteration budget exhausted first.
    MaxIterations,
    /// No further decrease is representable in floating point.
    PrecisionLimit,
}

#[derive(Debug, Clone)]
pub struct CftocSolution {
    /// Optimal inputs, one row per stage [rad/s].
    pub inputs: DMatrix<f64>,
    /// Predicted q_1..q_N, one row per stage.
    pub predicted_q: DMatrix<f64>,
    pub predicted_p: Vec<Vector3<f64>>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Set when the final bound-repair pass had to modify the inputs.
    pub state_repaired: bool,
    /// Objective at the start point and after each accepted step.
    pub objective_trace: Vec<f64>,
    pub wall_time_s: f64,
}

impl CftocSolution {
    pub fn first_input(&self) -> DVector<f64> {
        self.inputs.row(0).transpose()
    }

    /// Stacked inputs shifted by one stage, last stage repeated.
    pub fn shifted(&self) -> Vec<f64> {
        let (nh, n) = self.inputs.shape();
        let mut out = Vec::with_capacity(nh * n);
        for k in 0..nh {
            let src = (k + 1).min(nh - 1);
            out.extend(self.inputs.row(src).iter().copied());
        }
        out
    }
}

/// Solves the tracking subproblem with uniform weights over the horizon.
pub fn solve_cftoc<M: KinematicModel + ?Sized>(
    model: &M,
    cfg: &NmpcConfig,
    weights: &WeightMatrices,
    q0: &[f64],
    u_prev: &[f64],
    ref_window: &[Vector3<f64>],
    warm_start: Option<&[f64]>,
) -> Result<CftocSolution, NmpcError> {
    let stage_w = vec![Vector3::from(*weights.q()); ref_window.len()];
    let cost = TrackingCost {
        targets: ref_window,
        stage_weights: &stage_w,
        rate_weights: weights.r(),
    };
    solve_tracking(model, cfg, cost, q0, u_prev, warm_start)
}

/// Per-step solver telemetry recorded in repetition logs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub solve_ms: f64,
    /// The solve stalled and the shifted previous plan was applied instead.
    pub degraded: bool,
}

/// Closed-loop controller: keeps `u_prev` and the warm-start plan between steps.
#[derive(Debug, Clone)]
pub struct Controller<M> {
    model: M,
    cfg: NmpcConfig,
    weights: WeightMatrices,
    u_prev: DVector<f64>,
    plan: Option<Vec<f64>>,
}

impl<M: KinematicModel> Controller<M> {
    pub fn new(model: M, cfg: NmpcConfig, weights: WeightMatrices) -> Result<Self, NmpcError> {
        let n = model.dof();
        if weights.r().len() != n || cfg.limits.dof() != n {
            return Err(NmpcError::Dimension(format!("model has {n} joints")));
        }
        weights.check_bounds()?;
        Ok(Self {
            model,
            cfg,
            weights,
            u_prev: DVector::zeros(n),
            plan: None,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &WeightMatrices {
        &self.weights
    }

    pub fn u_prev(&self) -> &DVector<f64> {
        &self.u_prev
    }

    /// Swaps the weights used by subsequent solves; the warm start is kept.
    pub fn set_weights(&mut self, weights: WeightMatrices) -> Result<(), NmpcError> {
        if weights.r().len() != self.model.dof() {
            return Err(NmpcError::Dimension("R length".into()));
        }
        weights.check_bounds()?;
        self.weights = weights;
        Ok(())
    }

    /// Sets the previously applied command and drops the warm start.
    pub fn reset(&mut self, u_prev: DVector<f64>) {
        self.u_prev = u_prev;
        self.plan = None;
    }

    /// Solves the subproblem from `q` and returns the first input.
    pub fn control_step(
        &mut self,
        q: &[f64],
        ref_window: &[Vector3<f64>],
    ) -> Result<(DVector<f64>, StepTelemetry), NmpcError> {
        let warm = self.plan.as_deref();
        let result = solve_cftoc(
            &self.model,
            &self.cfg,
            &self.weights,
            q,
            self.u_prev.as_slice(),
            ref_window,
            warm,
        );
        match result {
            Ok(sol) => {
                let u = sol.first_input();
                self.plan = Some(sol.shifted());
                self.u_prev = u.clone();
                Ok((
                    u,
                    StepTelemetry {
                        iterations: sol.iterations,
                        kkt_residual: sol.kkt_residual,
                        solve_ms: sol.wall_time_s * 1e3,
                        degraded: false,
                    },
                ))
            }
            Err(NmpcError::SolverStall { iterations, kkt_residual }) => {
                let Some(plan) = self.plan.take() else {
                    return Err(NmpcError::SolverStall { iterations, kkt_residual });
                };
                let n = self.model.dof();
                let u = DVector::from_column_slice(&plan[..n]);
                // shift once more so the fallback plan keeps advancing
                let mut next = plan[n..].to_vec();
                next.extend_from_slice(&plan[plan.len() - n..]);
                self.plan = Some(next);
                self.u_prev = u.clone();
                Ok((
                    u,
                    StepTelemetry {
                        iterations,
                        kkt_residual,
                        solve_ms: f64::NAN,
                        degraded: true,
                    },
                ))
            }
            Err(e) => Err(e),
        }
    }
}
