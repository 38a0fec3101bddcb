use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::bo::BoConfig;
use crate::geometry::GeometryConfig;
use crate::kpi::KpiTargets;
use crate::nmpc::NmpcSettings;
use crate::robot::{IkOptions, JointLimits};
use crate::tuner::{TunerConfig, WeightLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    /// DH table CSV; the built-in UR10e table when absent.
    pub dh_csv: Option<PathBuf>,
    pub limits: Option<JointLimits>,
    /// Posture that seeds the IK of the first reference point.
    pub home: [f64; 6],
    pub ik: IkOptions,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            dh_csv: None,
            limits: None,
            home: [0.0, -FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2, -FRAC_PI_2, 0.0],
            ik: IkOptions::default(),
        }
    }
}

/// Core and sequence settings, inline or in a separate JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeometrySource {
    Path(PathBuf),
    Inline(GeometryConfig),
}

impl Default for GeometrySource {
    fn default() -> Self {
        Self::Inline(GeometryConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KpiConfig {
    #[serde(flatten)]
    pub targets: KpiTargets,
    /// Relative margin below the velocity limit that already counts as saturated.
    pub sat_tol: f64,
}

impl Default for KpiConfig {
    fn default() -> Self {
        Self { targets: KpiTargets::default(), sat_tol: 0.01 }
    }
}

/// Fixed-weight runs of the `track` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Log10 weights in the tuner layout; identity when absent.
    pub log_weights: Option<Vec<f64>>,
    pub repetitions: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { log_weights: None, repetitions: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub robot: RobotConfig,
    pub geometry: GeometrySource,
    pub nmpc: NmpcSettings,
    pub kpi: KpiConfig,
    pub tuner: TunerConfig,
    pub bo: BoConfig,
    pub track: TrackConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            robot: RobotConfig::default(),
            geometry: GeometrySource::default(),
            nmpc: NmpcSettings::default(),
            kpi: KpiConfig::default(),
            tuner: TunerConfig::default(),
            bo: BoConfig::default(),
            track: TrackConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.robot.dh_csv.as_mut() {
            fix(p);
        }
        if let GeometrySource::Path(p) = &mut self.geometry {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.kpi.targets.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let n_w = crate::tuner::WeightVector::len_for(self.tuner.layout, 6);
        self.tuner.validate(n_w).map_err(|e| HarnessError::Config(e.to_string()))?;
        let bo = self.bo_config();
        bo.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if bo.bounds.len() != n_w {
            return Err(HarnessError::Config(format!("bo.bounds has {} entries, tuner layout needs {n_w}", bo.bounds.len())));
        }
        if let Some(w) = &self.track.log_weights {
            if w.len() != n_w {
                return Err(HarnessError::Config(format!("track.log_weights needs {n_w} entries")));
            }
        }
        if let Some(p) = &self.robot.dh_csv {
            if !p.exists() {
                return Err(HarnessError::Config(format!("DH table {} not found", p.display())));
            }
        }
        if let GeometrySource::Path(p) = &self.geometry {
            if !p.exists() {
                return Err(HarnessError::Config(format!("geometry config {} not found", p.display())));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<GeometryConfig, HarnessError> {
        match &self.geometry {
            GeometrySource::Inline(g) => Ok(g.clone()),
            GeometrySource::Path(p) => GeometryConfig::from_path(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display()))),
        }
    }

    /// BO settings with the top-level seed mixed in and bounds matching the layout.
    pub fn bo_config(&self) -> BoConfig {
        let mut bo = self.bo.clone();
        bo.seed = bo.seed.wrapping_add(self.seed);
        if self.tuner.layout == WeightLayout::PerDiagonal && bo.bounds.len() == 2 {
            let (q, r) = (bo.bounds[0], bo.bounds[1]);
            bo.bounds = std::iter::repeat_n(q, 3).chain(std::iter::repeat_n(r, 6)).collect();
        }
        bo
    }
}
