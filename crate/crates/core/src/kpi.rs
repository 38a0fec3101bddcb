//! Task-level metrics of one repetition and their normalization against targets.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmpc::StepTelemetry;
use crate::robot::JointLimits;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("repetition log is empty")]
    EmptyLog,
    #[error("KPI targets must be strictly positive")]
    InvalidTargets,
    #[error("malformed log: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Target value of each metric; every entry divides in [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KpiTargets {
    pub rmse_star: f64,
    pub rms_du_star: f64,
    pub sat_star: f64,
    pub max_ee_star: f64,
}

impl Default for KpiTargets {
    fn default() -> Self {
        Self {
            rmse_star: 1e-3,
            rms_du_star: 0.025,
            sat_star: 0.05,
            max_ee_star: 2e-3,
        }
    }
}

impl KpiTargets {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let all = [self.rmse_star, self.rms_du_star, self.sat_star, self.max_ee_star];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) && self.sat_star <= 1.0 {
            Ok(())
        } else {
            Err(MetricsError::InvalidTargets)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    /// Position RMSE [m].
    pub rmse: f64,
    /// RMS of the input increment [rad/s].
    pub rms_du: f64,
    /// Fraction of steps with at least one saturated joint velocity.
    pub sat_ratio: f64,
    /// Largest instantaneous position error [m].
    pub max_ee: f64,
}

impl KpiReport {
    pub fn as_array(&self) -> [f64; 4] {
        [self.rmse, self.rms_du, self.sat_ratio, self.max_ee]
    }
}

/// Normalized error vector `(e_rmse, e_du, e_sat, e_maxee)`; positive entries
/// mean the metric misses its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiError(pub [f64; 4]);

impl KpiError {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// `sqrt(sum alpha_i e_i^2)`.
    pub fn weighted_norm(&self, alpha: &[f64; 4]) -> f64 {
        self.0
            .iter()
            .zip(alpha)
            .map(|(e, a)| a * e * e)
            .sum::<f64>()
            .sqrt()
    }

    /// True when no metric is worse than its target.
    pub fn targets_met(&self) -> bool {
        self.0.iter().all(|&e| e <= 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|e| e.is_finite())
    }
}

pub fn normalize(report: &KpiReport, targets: &KpiTargets) -> KpiError {
    let m = report.as_array();
    let t = [targets.rmse_star, targets.rms_du_star, targets.sat_star, targets.max_ee_star];
    KpiError(std::array::from_fn(|i| (m[i] - t[i]) / t[i]))
}

/// One closed-loop sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSample {
    pub t: f64,
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vector3<f64>,
    pub p_ref: Vector3<f64>,
    pub telemetry: StepTelemetry,
}

/// Time-stamped record of one task execution on a uniform time base.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepetitionLog {
    pub ts: f64,
    pub samples: Vec<LogSample>,
}

impl RepetitionLog {
    pub fn new(ts: f64) -> Self {
        Self { ts, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.samples.first().map_or(0, |s| s.q.len())
    }

    fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| (s.p - s.p_ref).norm())
    }

    /// Mean Euclidean tracking error [m].
    pub fn mean_error(&self) -> f64 {
        self.errors().sum::<f64>() / self.len().max(1) as f64
    }

    /// `sum_k |u_k|_2` over the repetition [rad/s].
    pub fn control_effort(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.u.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum()
    }

    /// Mean solve wall time over non-degraded steps [ms].
    pub fn mean_solve_ms(&self) -> f64 {
        let times: Vec<f64> = self
            .samples
            .iter()
            .map(|s| s.telemetry.solve_ms)
            .filter(|v| v.is_finite())
            .collect();
        if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        }
    }

    pub fn degraded_steps(&self) -> usize {
        self.samples.iter().filter(|s| s.telemetry.degraded).count()
    }

    pub fn csv_header(dof: usize) -> Vec<String> {
        let mut h = vec!["k".to_string(), "t".to_string()];
        h.extend((1..=dof).map(|i| format!("q{i}")));
        h.extend((1..=dof).map(|i| format!("u{i}")));
        for c in ["px", "py", "pz", "px_ref", "py_ref", "pz_ref", "iterations", "kkt_residual", "solve_ms", "degraded"] {
            h.push(c.to_string());
        }
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MetricsError> {
        let dof = self.dof();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::csv_header(dof))?;
        for (k, s) in self.samples.iter().enumerate() {
            let mut rec = vec![k.to_string(), s.t.to_string()];
            rec.extend(s.q.iter().map(f64::to_string));
            rec.extend(s.u.iter().map(f64::to_string));
            rec.extend(s.p.iter().chain(s.p_ref.iter()).map(f64::to_string));
            rec.push(s.telemetry.iterations.to_string());
            rec.push(s.telemetry.kkt_residual.to_string());
            rec.push(s.telemetry.solve_ms.to_string());
            rec.push(u8::from(s.telemetry.degraded).to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let cols = headers.len();
        if cols < 12 || (cols - 12) % 2 != 0 {
            return Err(MetricsError::Malformed(format!("{cols} columns")));
        }
        let dof = (cols - 12) / 2;
        if headers.iter().collect::<Vec<_>>() != Self::csv_header(dof) {
            return Err(MetricsError::Malformed("unexpected header".into()));
        }
        let parse = |s: &str| -> Result<f64, MetricsError> {
            s.parse::<f64>().map_err(|e| MetricsError::Malformed(format!("{s:?}: {e}")))
        };
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v = rec.iter().map(parse).collect::<Result<Vec<_>, _>>()?;
            let o = 2 + 2 * dof;
            samples.push(LogSample {
                t: v[1],
                q: v[2..2 + dof].to_vec(),
                u: v[2 + dof..o].to_vec(),
                p: Vector3::new(v[o], v[o + 1], v[o + 2]),
                p_ref: Vector3::new(v[o + 3], v[o + 4], v[o + 5]),
                telemetry: StepTelemetry {
                    iterations: v[o + 6] as usize,
                    kkt_residual: v[o + 7],
                    solve_ms: v[o + 8],
                    degraded: v[o + 9] != 0.0,
                },
            });
        }
        let ts = if samples.len() >= 2 { samples[1].t - samples[0].t } else { 0.0 };
        Ok(Self { ts, samples })
    }
}

/// Computes the four task metrics. The first increment uses `u_{-1} = 0`.
pub fn compute_report(
    log: &RepetitionLog,
    limits: &JointLimits,
    sat_tol: f64,
) -> Result<KpiReport, MetricsError> {
    if log.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let n = log.len() as f64;
    let mut sq_err = 0.0;
    let mut max_ee: f64 = 0.0;
    let mut sq_du = 0.0;
    let mut saturated = 0usize;
    let scale = 1.0 - sat_tol;
    let mut prev: Option<&[f64]> = None;
    for s in &log.samples {
        let e = (s.p - s.p_ref).norm();
        sq_err += e * e;
        max_ee = max_ee.max(e);
        sq_du += s
            .u
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let d = u - prev.map_or(0.0, |p| p[i]);
                d * d
            })
            .sum::<f64>();
        prev = Some(&s.u);
        let sat = s
            .u
            .iter()
            .enumerate()
            .any(|(i, &u)| u >= scale * limits.qdot_max[i] || u <= scale * limits.qdot_min[i]);
        if sat {
            saturated += 1;
        }
    }
    Ok(KpiReport {
        rmse: (sq_err / n).sqrt(),
        rms_du: (sq_du / n).sqrt(),
        sat_ratio: saturated as f64 / n,
        max_ee,
    })
}

/// Writes the per-repetition KPI CSV
/// `rep,rmse_m,rms_du,sat_ratio,max_ee_m,e_rmse,e_du,e_sat,e_maxee`.
pub fn write_kpi_csv<W: Write>(
    writer: W,
    rows: impl IntoIterator<Item = (usize, KpiReport, KpiError)>,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rep", "rmse_m", "rms_du", "sat_ratio", "max_ee_m", "e_rmse", "e_du", "e_sat", "e_maxee"])?;
    for (rep, r, e) in rows {
        let mut rec = vec![rep.to_string()];
        rec.extend(r.as_array().iter().chain(e.0.iter()).map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}
