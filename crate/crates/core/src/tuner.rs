//! Outer-loop weight tuning across task repetitions.
//!
//! After each repetition the normalized KPI error `e` is fed through a local
//! affine model `e' = e + S dW`, where `S` is estimated from perturbed
//! closed-loop rollouts. The increment minimizes
//! `|e + S dW|^2_alpha + |dW|^2_beta`, which has the closed form
//! `dW = -(S' alpha S + beta)^-1 S' alpha e`. Weights live in the log10 domain,
//! so additive increments scale Q and R multiplicatively and the bound box is
//! a plain interval per entry.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kpi::{KpiError, KpiReport, RepetitionLog};
use crate::nmpc::{WeightMatrices, Q_MAX, Q_MIN, R_MAX, R_MIN};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("closed-loop rollout failed: {0}")]
    RolloutFailure(String),
    #[error("non-finite KPI error at repetition {repetition}")]
    NonFinite { repetition: usize },
    #[error("invalid tuner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How log-weights map onto the diagonals of Q and R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLayout {
    /// One shared log-Q scalar and one shared log-R scalar.
    Shared,
    /// One log-weight per diagonal entry: 3 for Q, then one per joint for R.
    PerDiagonal,
}

/// Tunable parameter vector in the log10 domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub layout: WeightLayout,
    pub dof: usize,
}

impl WeightVector {
    pub fn len_for(layout: WeightLayout, dof: usize) -> usize {
        match layout {
            WeightLayout::Shared => 2,
            WeightLayout::PerDiagonal => 3 + dof,
        }
    }

    pub fn new(values: Vec<f64>, layout: WeightLayout, dof: usize) -> Result<Self, TunerError> {
        if values.len() != Self::len_for(layout, dof) {
            return Err(TunerError::Config(format!(
                "{:?} layout with {dof} joints needs {} log-weights, got {}",
                layout,
                Self::len_for(layout, dof),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TunerError::Config("non-finite log-weight".into()));
        }
        Ok(Self { values, layout, dof })
    }

    /// Q = I, R = I.
    pub fn identity(layout: WeightLayout, dof: usize) -> Self {
        Self { values: vec![0.0; Self::len_for(layout, dof)], layout, dof }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn is_q_entry(&self, i: usize) -> bool {
        match self.layout {
            WeightLayout::Shared => i == 0,
            WeightLayout::PerDiagonal => i < 3,
        }
    }

    /// Log-domain bounds of entry `i`.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        if self.is_q_entry(i) {
            (Q_MIN.log10(), Q_MAX.log10())
        } else {
            (R_MIN.log10(), R_MAX.log10())
        }
    }

    pub fn decode(&self) -> WeightMatrices {
        let p = |v: f64| 10f64.powf(v);
        let (q, r) = match self.layout {
            WeightLayout::Shared => ([p(self.values[0]); 3], vec![p(self.values[1]); self.dof]),
            WeightLayout::PerDiagonal => (
                [p(self.values[0]), p(self.values[1]), p(self.values[2])],
                self.values[3..].iter().map(|&v| p(v)).collect(),
            ),
        };
        WeightMatrices::new(q, r).expect("powers of ten are positive")
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self { values, layout: self.layout, dof: self.dof }
    }
}

/// Element-wise clamp into the log-domain bound box; also reports which
/// entries were clipped.
pub fn clip_to_bounds(w: &WeightVector) -> (WeightVector, Vec<bool>) {
    let mut clipped = vec![false; w.len()];
    let values = w
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = w.bounds(i);
            let c = v.clamp(lo, hi);
            clipped[i] = c != v;
            c
        })
        .collect();
    (w.with_values(values), clipped)
}

/// Empirical Jacobian of the KPI error with respect to the log-weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    /// 4 x n_w, per log-decade.
    pub s: DMatrix<f64>,
    /// Signed perturbation used for each column; negative means backward difference.
    pub steps: Vec<f64>,
    /// Repetition index (0-based) at which it was estimated.
    pub repetition: usize,
}

/// Outcome of one closed-loop repetition.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub error: KpiError,
    pub report: Option<KpiReport>,
    pub control_effort: f64,
    pub log: Option<RepetitionLog>,
}

impl Evaluation {
    /// An evaluation carrying only the error vector.
    pub fn from_error(error: KpiError) -> Self {
        Self { error, report: None, control_effort: 0.0, log: None }
    }
}

/// Executes one full repetition with the given weights.
pub trait Rollout: Sync {
    fn run(&self, w: &WeightVector) -> Result<Evaluation, TunerError>;
}

impl<F> Rollout for F
where
    F: Fn(&WeightVector) -> Result<Evaluation, TunerError> + Sync,
{
    fn run(&self, w: &WeightVector) -> Result<Evaluation, TunerError> {
        self(w)
    }
}

fn column_steps(w: &WeightVector, delta: &[f64]) -> Vec<f64> {
    (0..w.len())
        .map(|j| {
            let (lo, hi) = w.bounds(j);
            let d = delta[j];
            if w.values[j] + d <= hi || w.values[j] - d < lo {
                d
            } else {
                -d
            }
        })
        .collect()
}

fn sensitivity_columns<R: Rollout + ?Sized>(
    rollout: &R,
    w: &WeightVector,
    steps: &[f64],
    base: &KpiError,
) -> Result<DMatrix<f64>, TunerError> {
    let cols: Vec<Result<KpiError, TunerError>> = (0..w.len())
        .into_par_iter()
        .map(|j| {
            let mut v = w.values.clone();
            v[j] += steps[j];
            rollout.run(&w.with_values(v)).map(|e| e.error)
        })
        .collect();
    let mut s = DMatrix::zeros(4, w.len());
    for (j, col) in cols.into_iter().enumerate() {
        let e = col?;
        if !e.is_finite() {
            return Err(TunerError::RolloutFailure(format!("non-finite KPI in sensitivity column {j}")));
        }
        for i in 0..4 {
            s[(i, j)] = (e.0[i] - base.0[i]) / steps[j];
        }
    }
    Ok(s)
}

fn broadcast(v: &[f64], n: usize, name: &str) -> Result<Vec<f64>, TunerError> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        m if m == n => Ok(v.to_vec()),
        m => Err(TunerError::Config(format!("{name} has {m} entries, expected 1 or {n}"))),
    }
}

/// Forward-difference sensitivity in the log domain. Consumes `n_w + 1`
/// rollouts (base plus one per column) and returns the base evaluation.
/// Entries too close to their upper bound are differenced backwards.
pub fn estimate_sensitivity<R: Rollout + ?Sized>(
    rollout: &R,
    w: &WeightVector,
    delta: &[f64],
) -> Result<(SensitivityMatrix, Evaluation), TunerError> {
    let delta = broadcast(delta, w.len(), "delta")?;
    let steps = column_steps(w, &delta);
    let base = rollout.run(w)?;
    if !base.error.is_finite() {
        return Err(TunerError::NonFinite { repetition: 0 });
    }
    let s = sensitivity_columns(rollout, w, &steps, &base.error)?;
    Ok((SensitivityMatrix { s, steps, repetition: 0 }, base))
}

/// `dW = -(S' alpha S + beta)^-1 S' alpha e`.
pub fn norm_optimal_update(e: &KpiError, s: &DMatrix<f64>, alpha: &[f64; 4], beta: &[f64]) -> DVector<f64> {
    let nw = s.ncols();
    let alpha_s = DMatrix::from_fn(4, nw, |i, j| alpha[i] * s[(i, j)]);
    let mut lhs = s.transpose() * &alpha_s;
    for j in 0..nw {
        lhs[(j, j)] += beta[j];
    }
    let rhs = alpha_s.transpose() * DVector::from_column_slice(&e.0);
    let chol = lhs.cholesky().expect("S' alpha S + beta is positive definite for beta > 0");
    -chol.solve(&rhs)
}

/// Value of `|e + S dW|^2_alpha + |dW|^2_beta`.
pub fn update_objective(e: &KpiError, s: &DMatrix<f64>, alpha: &[f64; 4], beta: &[f64], dw: &DVector<f64>) -> f64 {
    let pred = DVector::from_column_slice(&e.0) + s * dw;
    let a: f64 = (0..4).map(|i| alpha[i] * pred[i] * pred[i]).sum();
    let b: f64 = dw.iter().zip(beta).map(|(d, b)| b * d * d).sum();
    a + b
}

/// Stopping rule of the repetition loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceTest {
    /// `|e| <= epsilon`.
    Norm,
    /// Every metric at or below its target (`e_i <= 0`).
    TargetsMet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    /// KPI priorities (rmse, du, sat, maxee).
    pub alpha: [f64; 4],
    /// Update regularization; one entry (broadcast) or one per log-weight.
    pub beta: Vec<f64>,
    /// Perturbation size in log decades; one entry (broadcast) or one per log-weight.
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub ell_max: usize,
    /// Re-estimate the sensitivity every k repetitions; `None` keeps the first estimate.
    pub refresh_every: Option<usize>,
    pub convergence: ConvergenceTest,
    pub layout: WeightLayout,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            alpha: [10.0, 1.0, 1.0, 5.0],
            beta: vec![0.1],
            delta: vec![0.5],
            epsilon: 0.05,
            ell_max: 10,
            refresh_every: None,
            convergence: ConvergenceTest::Norm,
            layout: WeightLayout::Shared,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self, n_w: usize) -> Result<(), TunerError> {
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(TunerError::Config("alpha entries must be >= 0".into()));
        }
        if broadcast(&self.beta, n_w, "beta")?.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(TunerError::Config("beta entries must be > 0".into()));
        }
        if broadcast(&self.delta, n_w, "delta")?.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(TunerError::Config("delta entries must be > 0".into()));
        }
        if self.ell_max < 1 {
            return Err(TunerError::Config("ell_max must be >= 1".into()));
        }
        if self.refresh_every == Some(0) {
            return Err(TunerError::Config("refresh_every must be >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(TunerError::Config("epsilon must be >= 0".into()));
        }
        Ok(())
    }

    fn is_converged(&self, e: &KpiError) -> bool {
        match self.convergence {
            ConvergenceTest::Norm => e.norm() <= self.epsilon,
            ConvergenceTest::TargetsMet => e.targets_met(),
        }
    }
}

/// Record of one executed repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningEntry {
    /// 1-based repetition number.
    pub repetition: usize,
    pub log_weights: Vec<f64>,
    pub q_diag: [f64; 3],
    pub r_diag: Vec<f64>,
    pub report: Option<KpiReport>,
    pub error: KpiError,
    pub error_norm: f64,
    /// Increment applied after this repetition (absent on the last one).
    pub delta_w: Option<Vec<f64>>,
    /// Entries clamped by the bound box when applying `delta_w`.
    pub clipped: Vec<bool>,
    pub control_effort: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningHistory {
    pub entries: Vec<TuningEntry>,
    pub converged: bool,
    pub sensitivities: Vec<SensitivityMatrix>,
    /// Closed-loop rollouts consumed, sensitivity columns included.
    pub rollouts: usize,
    pub final_weights: WeightVector,
    #[serde(skip)]
    pub final_log: Option<RepetitionLog>,
}

impl TuningHistory {
    pub fn last(&self) -> &TuningEntry {
        self.entries.last().expect("history has at least one repetition")
    }

    /// Per-repetition weights, control effort and KPIs.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TunerError> {
        let mut w = csv::Writer::from_writer(writer);
        let dof = self.final_weights.dof;
        let mut header = vec!["rep".to_string(), "Q11".into(), "Q22".into(), "Q33".into()];
        header.extend((1..=dof).map(|i| format!("R{i}{i}")));
        for c in ["control_effort", "rmse_m", "rms_du", "sat_ratio", "max_ee_m", "e_rmse", "e_du", "e_sat", "e_maxee"] {
            header.push(c.into());
        }
        w.write_record(&header)?;
        for e in &self.entries {
            let mut rec = vec![e.repetition.to_string()];
            rec.extend(e.q_diag.iter().chain(e.r_diag.iter()).map(f64::to_string));
            rec.push(e.control_effort.to_string());
            match &e.report {
                Some(r) => rec.extend(r.as_array().iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
            rec.extend(e.error.0.iter().map(f64::to_string));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Repetition loop: execute, measure, update, until converged or `ell_max`
/// repetitions have run.
pub fn run_tuning<R: Rollout + ?Sized>(
    cfg: &TunerConfig,
    rollout: &R,
    w0: &WeightVector,
) -> Result<TuningHistory, TunerError> {
    let n_w = w0.len();
    cfg.validate(n_w)?;
    let beta = broadcast(&cfg.beta, n_w, "beta")?;
    let delta = broadcast(&cfg.delta, n_w, "delta")?;

    let (mut w, _) = clip_to_bounds(w0);
    let mut entries = Vec::new();
    let mut sensitivities: Vec<SensitivityMatrix> = Vec::new();
    let mut rollouts = 0;
    let mut converged = false;
    let mut final_log = None;

    for ell in 0..cfg.ell_max {
        let eval = rollout.run(&w)?;
        rollouts += 1;
        if !eval.error.is_finite() {
            return Err(TunerError::NonFinite { repetition: ell + 1 });
        }
        let decoded = w.decode();
        let mut entry = TuningEntry {
            repetition: ell + 1,
            log_weights: w.values.clone(),
            q_diag: *decoded.q(),
            r_diag: decoded.r().to_vec(),
            report: eval.report,
            error: eval.error,
            error_norm: eval.error.norm(),
            delta_w: None,
            clipped: vec![false; n_w],
            control_effort: eval.control_effort,
        };
        final_log = eval.log;

        if cfg.is_converged(&eval.error) {
            converged = true;
            entries.push(entry);
            break;
        }
        if ell + 1 == cfg.ell_max {
            entries.push(entry);
            break;
        }

        let refresh = match (sensitivities.last(), cfg.refresh_every) {
            (None, _) => true,
            (Some(last), Some(k)) => ell >= last.repetition + k,
            (Some(_), None) => false,
        };
        if refresh {
            let steps = column_steps(&w, &delta);
            let s = sensitivity_columns(rollout, &w, &steps, &eval.error)?;
            rollouts += n_w;
            sensitivities.push(SensitivityMatrix { s, steps, repetition: ell });
        }
        let s = &sensitivities.last().expect("estimated above").s;

        let dw = norm_optimal_update(&eval.error, s, &cfg.alpha, &beta);
        let proposed: Vec<f64> = w.values.iter().zip(dw.iter()).map(|(a, b)| a + b).collect();
        let (next, clipped) = clip_to_bounds(&w.with_values(proposed));
        log::info!(
            "repetition {}: |e| = {:.4}, e = {:?}, dW = {:?}",
            ell + 1,
            entry.error_norm,
            eval.error.0,
            dw.as_slice()
        );
        entry.delta_w = Some(dw.iter().copied().collect());
        entry.clipped = clipped;
        entries.push(entry);
        w = next;
    }

    Ok(TuningHistory {
        entries,
        converged,
        sensitivities,
        rollouts,
        final_weights: w,
        final_log,
    })
}
