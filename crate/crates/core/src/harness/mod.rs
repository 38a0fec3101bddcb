//! Closed-loop repetitions, experiment orchestration and persisted outputs.

mod commands;
mod compare;
mod config;
mod io;

use nalgebra::Vector3;
use thiserror::Error;

pub use commands::{cmd_bo, cmd_compare, cmd_plan, cmd_report, cmd_track, cmd_tune, Command};
pub use compare::{build_comparison, summarize, ComparisonReport, MethodSummary};
pub use config::{ExperimentConfig, GeometrySource, KpiConfig, RobotConfig, TrackConfig};
pub use io::{check_writable, partial_path, write_atomic};

use crate::bo::{bo_minimize, BoError, BoResult};
use crate::geometry::{plan_open_loop, GeometryConfig, GeometryError, PlannedPath, ReferencePath};
use crate::kpi::{compute_report, normalize, KpiError, KpiReport, LogSample, MetricsError, RepetitionLog};
use crate::nmpc::{Controller, KinematicModel, NmpcConfig, NmpcError};
use crate::robot::{inverse_kinematics_with, plant_step, DhParameters, JointCommand, JointLimits, JointState, Manipulator, RobotError};
use crate::tuner::{run_tuning, Evaluation, TunerError, TuningHistory, WeightVector};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("reference path is empty")]
    EmptyReference,
    #[error("solver failed at step {step}: {source}")]
    Solver {
        step: usize,
        #[source]
        source: NmpcError,
    },
    #[error("tuning stopped after {repetitions} repetitions without meeting the convergence test")]
    NotConverged { repetitions: usize },
    #[error("{0} exists; pass --force to overwrite")]
    WouldOverwrite(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 config/input, 3 solver or runtime failure, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::EmptyReference | Self::WouldOverwrite(_) | Self::MissingInput(_) | Self::Json(_) => 2,
            Self::Geometry(GeometryError::Invalid(_) | GeometryError::EmptySequence(_) | GeometryError::Json(_)) => 2,
            Self::Robot(RobotError::RowCount(_) | RobotError::NonFinite { .. } | RobotError::InvalidLimits(_)) => 2,
            Self::NotConverged { .. } => 4,
            _ => 3,
        }
    }
}

/// Runs the plant over the whole reference with a sliding `N`-point window.
/// The log pairs each state `q_k` with the input applied at `k` and `p_ref_k`.
pub fn run_repetition<M: KinematicModel>(
    controller: &mut Controller<M>,
    path: &ReferencePath,
    q0: &[f64],
) -> Result<RepetitionLog, HarnessError> {
    if path.is_empty() {
        return Err(HarnessError::EmptyReference);
    }
    let n = controller.model().dof();
    if q0.len() != n {
        return Err(HarnessError::Config(format!("q0 has {} entries, model has {n} joints", q0.len())));
    }
    let horizon = controller.config().settings.horizon;
    let ts = controller.config().settings.ts_s;
    let limits = controller.config().limits.clone();
    controller.reset(nalgebra::DVector::zeros(n));

    let mut log = RepetitionLog::new(ts);
    log.samples.reserve(path.len());
    let mut q = q0.to_vec();
    for k in 0..path.len() {
        let window = path.window(k, horizon);
        let (u, telemetry) = controller
            .control_step(&q, &window)
            .map_err(|source| HarnessError::Solver { step: k, source })?;
        let p = controller.model().position(&q);
        log.samples.push(LogSample {
            t: k as f64 * ts,
            q: q.clone(),
            u: u.as_slice().to_vec(),
            p,
            p_ref: path.points[k].p,
            telemetry,
        });
        let next = plant_step(&JointState::from_slice(&q), &JointCommand::from_slice(u.as_slice()), ts, &limits);
        q = next.0.as_slice().to_vec();
    }
    Ok(log)
}

/// One evaluated repetition.
#[derive(Debug, Clone)]
pub struct RepetitionResult {
    pub log: RepetitionLog,
    pub report: KpiReport,
    pub error: KpiError,
}

/// Loaded robot, planned reference and controller settings shared by all commands.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub geometry: GeometryConfig,
    pub model: Manipulator,
    pub nmpc: NmpcConfig,
    pub raw_path: ReferencePath,
    pub plan: PlannedPath,
    pub q0: Vec<f64>,
}

impl Experiment {
    /// Densifies the winding path, solves IK for its first point from the
    /// home posture, and smooths the path with the open-loop planner.
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let dh = match &config.robot.dh_csv {
            Some(p) => DhParameters::from_csv_path(p)?,
            None => DhParameters::ur10e(),
        };
        let limits = config.robot.limits.clone().unwrap_or_else(JointLimits::ur10e);
        let nmpc = NmpcConfig::new(config.nmpc.clone(), limits.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
        let geometry = config.geometry()?;
        let raw_path = geometry.densify(nmpc.settings.ts_s)?;
        if raw_path.is_empty() {
            return Err(HarnessError::EmptyReference);
        }
        let home = JointState::from_slice(&config.robot.home);
        let first = raw_path.points[0].p;
        let q0 = inverse_kinematics_with(&dh, &first, &home, &limits, &config.robot.ik)?;
        let q0: Vec<f64> = q0.0.as_slice().to_vec();
        let model = Manipulator::new(dh);
        let plan = plan_open_loop(&model, &nmpc, &raw_path, &geometry.planner, &q0)?;
        Ok(Self { config, geometry, model, nmpc, raw_path, plan, q0 })
    }

    /// Tracking reference (the planner's FK trajectory).
    pub fn reference(&self) -> &ReferencePath {
        &self.plan.reference
    }

    pub fn limits(&self) -> &JointLimits {
        &self.nmpc.limits
    }

    pub fn repetition(&self, w: &WeightVector) -> Result<RepetitionResult, HarnessError> {
        let mut ctrl = Controller::new(&self.model, self.nmpc.clone(), w.decode())?;
        let log = run_repetition(&mut ctrl, self.reference(), &self.q0)?;
        let report = compute_report(&log, self.limits(), self.config.kpi.sat_tol)?;
        let error = normalize(&report, &self.config.kpi.targets);
        Ok(RepetitionResult { log, report, error })
    }

    pub fn evaluate(&self, w: &WeightVector) -> Result<Evaluation, TunerError> {
        let r = self.repetition(w).map_err(|e| TunerError::RolloutFailure(e.to_string()))?;
        Ok(Evaluation {
            error: r.error,
            report: Some(r.report),
            control_effort: r.log.control_effort(),
            log: Some(r.log),
        })
    }

    pub fn initial_weights(&self) -> WeightVector {
        WeightVector::identity(self.config.tuner.layout, self.model.dof())
    }

    pub fn tune(&self) -> Result<TuningHistory, HarnessError> {
        let rollout = |w: &WeightVector| self.evaluate(w);
        Ok(run_tuning(&self.config.tuner, &rollout, &self.initial_weights())?)
    }

    /// BO over the same log-weight box, minimizing `|e|_alpha`.
    pub fn bo(&self) -> Result<BoRun, HarnessError> {
        let cfg = self.config.bo_config();
        let alpha = self.config.tuner.alpha;
        let layout = self.config.tuner.layout;
        let dof = self.model.dof();
        let mut evals: Vec<Option<(KpiReport, KpiError)>> = Vec::with_capacity(cfg.budget);
        let mut best: Option<(f64, RepetitionLog)> = None;
        let result = bo_minimize(
            |x: &[f64]| -> Result<f64, HarnessError> {
                let w = WeightVector::new(x.to_vec(), layout, dof)?;
                match self.repetition(&w) {
                    Ok(r) => {
                        let y = r.error.weighted_norm(&alpha);
                        evals.push(Some((r.report, r.error)));
                        if best.as_ref().is_none_or(|(b, _)| y < *b) {
                            best = Some((y, r.log));
                        }
                        Ok(y)
                    }
                    Err(e) => {
                        evals.push(None);
                        Err(e)
                    }
                }
            },
            &cfg,
        )?;
        Ok(BoRun { result, evaluations: evals, best_log: best.map(|b| b.1) })
    }
}

/// BO result with the KPIs of every evaluation and the log of the best one.
#[derive(Debug, Clone)]
pub struct BoRun {
    pub result: BoResult,
    pub evaluations: Vec<Option<(KpiReport, KpiError)>>,
    pub best_log: Option<RepetitionLog>,
}

impl BoRun {
    pub fn best_report(&self) -> Option<KpiReport> {
        self.evaluations.get(self.result.best_eval - 1).and_then(|e| e.map(|(r, _)| r))
    }
}

/// Euclidean tracking error per sample [m].
pub fn tracking_errors(log: &RepetitionLog) -> Vec<f64> {
    log.samples.iter().map(|s| (s.p - s.p_ref).norm()).collect()
}

pub(crate) fn vec3_fields(v: &Vector3<f64>) -> [String; 3] {
    [v.x.to_string(), v.y.to_string(), v.z.to_string()]
}
