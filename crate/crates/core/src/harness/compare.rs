use std::io::Write;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::kpi::{compute_report, KpiReport, RepetitionLog};
use crate::robot::JointLimits;

/// Table row values of one method, recomputed from its log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Repetitions (tuner) or evaluation index of the best point (BO).
    pub convergence: Option<usize>,
    /// Closed-loop rollouts consumed in total.
    pub rollouts: Option<usize>,
    pub rmse_mm: f64,
    pub max_error_mm: f64,
    pub mean_error_mm: f64,
    pub control_effort: f64,
    pub rms_control: f64,
    pub mean_solve_ms: f64,
    pub kpi: KpiReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<MethodSummary>,
    pub control_effort_definition: String,
    pub computation_time_definition: String,
}

pub const CONTROL_EFFORT_DEFINITION: &str = "sum over steps of |u_k|_2 in rad/s, no sampling-time factor";
pub const COMPUTATION_TIME_DEFINITION: &str = "mean per-step NMPC solve wall time in ms";

/// Builds one summary row from a persisted repetition log.
pub fn summarize(
    method: &str,
    log: &RepetitionLog,
    limits: &JointLimits,
    sat_tol: f64,
    convergence: Option<usize>,
    rollouts: Option<usize>,
) -> Result<MethodSummary, HarnessError> {
    let kpi = compute_report(log, limits, sat_tol)?;
    Ok(MethodSummary {
        method: method.to_string(),
        convergence,
        rollouts,
        rmse_mm: kpi.rmse * 1e3,
        max_error_mm: kpi.max_ee * 1e3,
        mean_error_mm: log.mean_error() * 1e3,
        control_effort: log.control_effort(),
        rms_control: kpi.rms_du,
        mean_solve_ms: log.mean_solve_ms(),
        kpi,
    })
}

pub fn build_comparison(methods: Vec<MethodSummary>) -> ComparisonReport {
    ComparisonReport {
        methods,
        control_effort_definition: CONTROL_EFFORT_DEFINITION.into(),
        computation_time_definition: COMPUTATION_TIME_DEFINITION.into(),
    }
}

impl ComparisonReport {
    /// One row per metric, one column per method.
    pub fn write_table<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["metric".to_string()];
        header.extend(self.methods.iter().map(|m| m.method.clone()));
        w.write_record(&header)?;
        let rows: [(&str, fn(&MethodSummary) -> String); 7] = [
            ("convergence", |m| m.convergence.map_or("-".into(), |c| c.to_string())),
            ("rmse_mm", |m| m.rmse_mm.to_string()),
            ("max_error_mm", |m| m.max_error_mm.to_string()),
            ("mean_error_mm", |m| m.mean_error_mm.to_string()),
            ("control_effort_rad_s", |m| m.control_effort.to_string()),
            ("rms_control_rad_s", |m| m.rms_control.to_string()),
            ("computation_time_ms", |m| m.mean_solve_ms.to_string()),
        ];
        for (name, f) in rows {
            let mut rec = vec![name.to_string()];
            rec.extend(self.methods.iter().map(f));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
