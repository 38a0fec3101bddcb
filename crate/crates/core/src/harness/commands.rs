//! CLI command bodies. Each checks its targets before running, then writes
//! every file through a `.partial` temporary.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use super::compare::summarize;
use super::{build_comparison, check_writable, vec3_fields, write_atomic, Experiment, ExperimentConfig, HarnessError};
use crate::bo::BoResult;
use crate::kpi::{write_kpi_csv, RepetitionLog};
use crate::tuner::{TuningHistory, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Plan,
    Track,
    Tune,
    Bo,
    Compare,
    Report,
}

impl Command {
    pub fn run(self, cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
        match self {
            Self::Plan => cmd_plan(cfg, force),
            Self::Track => cmd_track(cfg, force),
            Self::Tune => cmd_tune(cfg, force),
            Self::Bo => cmd_bo(cfg, force),
            Self::Compare => cmd_compare(cfg, force),
            Self::Report => cmd_report(cfg, force),
        }
    }
}

pub const FIXED_LOG: &str = "track/log_rep01.csv";
pub const TUNED_LOG: &str = "tune/final_log.csv";
pub const BO_LOG: &str = "bo/best_log.csv";
pub const TUNE_HISTORY: &str = "tune/history.json";
pub const BO_RESULT: &str = "bo/result.json";

fn out(cfg: &ExperimentConfig, rel: &str) -> PathBuf {
    cfg.output_dir.join(rel)
}

fn write_log(path: &Path, log: &RepetitionLog) -> Result<(), HarnessError> {
    write_atomic(path, |w| Ok(log.write_csv(w)?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        Ok(w.write_all(b"\n")?)
    })
}

pub fn cmd_plan(cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
    let targets = ["raw_path.csv", "reference.csv", "planned_joints.csv"].map(|f| out(cfg, f));
    check_writable(&targets, force)?;
    let exp = Experiment::new(cfg.clone())?;
    write_atomic(&targets[0], |w| Ok(exp.raw_path.write_csv(w)?))?;
    write_atomic(&targets[1], |w| Ok(exp.reference().write_csv(w)?))?;
    write_atomic(&targets[2], |w| {
        let mut c = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=exp.q0.len()).map(|i| format!("q{i}")));
        c.write_record(&header)?;
        for (pt, q) in exp.reference().points.iter().zip(&exp.plan.joints) {
            let mut rec = vec![pt.t.to_string()];
            rec.extend(q.iter().map(f64::to_string));
            c.write_record(rec)?;
        }
        c.flush()?;
        Ok(())
    })?;
    log::info!("planned {} samples, planner cost {:.6e}", exp.reference().len(), exp.plan.cost);
    Ok(())
}

pub fn cmd_track(cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
    let reps = cfg.track.repetitions.max(1);
    let mut targets: Vec<PathBuf> = (1..=reps).map(|r| out(cfg, &format!("track/log_rep{r:02}.csv"))).collect();
    targets.push(out(cfg, "track/kpi.csv"));
    check_writable(&targets, force)?;
    let exp = Experiment::new(cfg.clone())?;
    let w = match &cfg.track.log_weights {
        Some(v) => WeightVector::new(v.clone(), cfg.tuner.layout, exp.q0.len())?,
        None => exp.initial_weights(),
    };
    let mut rows = Vec::with_capacity(reps);
    for r in 1..=reps {
        let res = exp.repetition(&w)?;
        log::info!("repetition {r}: rmse {:.4} mm, max {:.4} mm", res.report.rmse * 1e3, res.report.max_ee * 1e3);
        write_log(&targets[r - 1], &res.log)?;
        rows.push((r, res.report, res.error));
    }
    write_atomic(&targets[reps], |w| Ok(write_kpi_csv(w, rows)?))
}

pub fn cmd_tune(cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
    let targets = [TUNE_HISTORY, "tune/history.csv", "tune/kpi.csv", TUNED_LOG].map(|f| out(cfg, f));
    check_writable(&targets, force)?;
    let exp = Experiment::new(cfg.clone())?;
    let history = exp.tune()?;
    write_json(&targets[0], &history)?;
    write_atomic(&targets[1], |w| Ok(history.write_csv(w)?))?;
    write_atomic(&targets[2], |w| write_tuning_kpis(w, &history))?;
    if let Some(log) = &history.final_log {
        write_log(&targets[3], log)?;
    }
    log::info!(
        "tuning: {} repetitions, {} rollouts, converged = {}",
        history.entries.len(),
        history.rollouts,
        history.converged
    );
    if history.converged {
        Ok(())
    } else {
        Err(HarnessError::NotConverged { repetitions: history.entries.len() })
    }
}

/// KPI CSV of a tuning run, one row per repetition.
pub fn write_tuning_kpis<W: Write>(w: W, history: &TuningHistory) -> Result<(), HarnessError> {
    let rows = history
        .entries
        .iter()
        .filter_map(|e| e.report.map(|r| (e.repetition, r, e.error)));
    Ok(write_kpi_csv(w, rows)?)
}

pub fn cmd_bo(cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
    let targets = ["bo/history.csv", "bo/kpi.csv", BO_LOG, BO_RESULT].map(|f| out(cfg, f));
    check_writable(&targets, force)?;
    let exp = Experiment::new(cfg.clone())?;
    let run = exp.bo()?;
    write_atomic(&targets[0], |w| Ok(run.result.write_csv(w, true)?))?;
    let rows = run
        .evaluations
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.map(|(r, err)| (i + 1, r, err)));
    write_atomic(&targets[1], |w| Ok(write_kpi_csv(w, rows)?))?;
    if let Some(log) = &run.best_log {
        write_log(&targets[2], log)?;
    }
    write_json(&targets[3], &run.result)?;
    log::info!("BO best objective {:.6} at evaluation {}", run.result.best_y, run.result.best_eval);
    Ok(())
}

fn read_log(path: &Path) -> Result<RepetitionLog, HarnessError> {
    Ok(RepetitionLog::read_csv(BufReader::new(File::open(path)?))?)
}

fn available_logs(cfg: &ExperimentConfig) -> Vec<(&'static str, PathBuf)> {
    [("fixed", FIXED_LOG), ("tuned", TUNED_LOG), ("bo", BO_LOG)]
        .into_iter()
        .map(|(m, f)| (m, out(cfg, f)))
        .filter(|(_, p)| p.exists())
        .collect()
}

pub fn cmd_compare(cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
    let targets = ["summary.json", "comparison.csv"].map(|f| out(cfg, f));
    let logs = available_logs(cfg);
    if logs.is_empty() {
        return Err(HarnessError::MissingInput(format!("no repetition logs under {}", cfg.output_dir.display())));
    }
    check_writable(&targets, force)?;
    let limits = cfg.robot.limits.clone().unwrap_or_else(crate::robot::JointLimits::ur10e);
    let mut rows = Vec::new();
    for (method, path) in logs {
        let log = read_log(&path)?;
        let (conv, rollouts) = match method {
            "tuned" => {
                let h: TuningHistory = serde_json::from_reader(BufReader::new(File::open(out(cfg, TUNE_HISTORY))?))?;
                (Some(h.entries.len()), Some(h.rollouts))
            }
            "bo" => {
                let r: BoResult = serde_json::from_reader(BufReader::new(File::open(out(cfg, BO_RESULT))?))?;
                (Some(r.best_eval), Some(r.history.len()))
            }
            _ => (None, None),
        };
        rows.push(summarize(method, &log, &limits, cfg.kpi.sat_tol, conv, rollouts)?);
    }
    let report = build_comparison(rows);
    write_json(&targets[0], &report)?;
    write_atomic(&targets[1], |w| report.write_table(w))
}

pub fn cmd_report(cfg: &ExperimentConfig, force: bool) -> Result<(), HarnessError> {
    let logs = available_logs(cfg);
    if logs.is_empty() {
        return Err(HarnessError::MissingInput(format!("no repetition logs under {}", cfg.output_dir.display())));
    }
    let targets: Vec<PathBuf> = logs
        .iter()
        .flat_map(|(m, _)| ["position", "joints", "velocities"].map(|k| out(cfg, &format!("report/{m}_{k}.csv"))))
        .collect();
    check_writable(&targets, force)?;
    for (i, (_, path)) in logs.iter().enumerate() {
        let log = read_log(path)?;
        let dof = log.dof();
        write_atomic(&targets[3 * i], |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["t", "px", "py", "pz", "px_ref", "py_ref", "pz_ref", "error"])?;
            for s in &log.samples {
                let mut rec = vec![s.t.to_string()];
                rec.extend(vec3_fields(&s.p));
                rec.extend(vec3_fields(&s.p_ref));
                rec.push((s.p - s.p_ref).norm().to_string());
                c.write_record(rec)?;
            }
            c.flush()?;
            Ok(())
        })?;
        for (j, prefix, pick) in [(1, "q", true), (2, "u", false)] {
            write_atomic(&targets[3 * i + j], |w| {
                let mut c = csv::Writer::from_writer(w);
                let mut header = vec!["t".to_string()];
                header.extend((1..=dof).map(|k| format!("{prefix}{k}")));
                c.write_record(&header)?;
                for s in &log.samples {
                    let mut rec = vec![s.t.to_string()];
                    rec.extend(if pick { &s.q } else { &s.u }.iter().map(f64::to_string));
                    c.write_record(rec)?;
                }
                c.flush()?;
                Ok(())
            })?;
        }
    }
    Ok(())
}
