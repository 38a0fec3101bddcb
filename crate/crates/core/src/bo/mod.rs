//! Bayesian-optimization baseline over the log-weight box.

mod gp;
mod nelder_mead;

use std::fmt::Display;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

pub use gp::{gp_fit, matern52_ard, FitOptions, GpModel, Hyperparams};
pub use nelder_mead::{nelder_mead, NelderMeadResult};

use crate::nmpc::{Q_MAX, Q_MIN, R_MAX, R_MIN};

#[derive(Debug, Error)]
pub enum BoError {
    #[error("kernel matrix could not be factorized")]
    IllConditioned,
    #[error("invalid BO input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Standardized variance below which the proposal is treated as already explored.
const MIN_PROPOSAL_VAR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    /// Search box per dimension, `[lo, hi]`.
    pub bounds: Vec<[f64; 2]>,
    pub budget: usize,
    pub init_design: usize,
    pub jitter: f64,
    pub seed: u64,
    pub candidates: usize,
    /// Best random candidates refined by a local simplex search.
    pub polish: usize,
    pub fit: FitOptions,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            bounds: vec![[Q_MIN.log10(), Q_MAX.log10()], [R_MIN.log10(), R_MAX.log10()]],
            budget: 100,
            init_design: 10,
            jitter: 0.01,
            seed: 0,
            candidates: 2048,
            polish: 4,
            fit: FitOptions::default(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<(), BoError> {
        if self.bounds.is_empty() || self.bounds.iter().any(|b| !(b[0] < b[1]) || !b[0].is_finite() || !b[1].is_finite()) {
            return Err(BoError::Invalid("bounds must be finite with lo < hi".into()));
        }
        if self.init_design < 2 || self.budget < self.init_design {
            return Err(BoError::Invalid(format!(
                "need budget >= init_design >= 2, got {} and {}",
                self.budget, self.init_design
            )));
        }
        if !(self.jitter >= 0.0) || self.candidates == 0 {
            return Err(BoError::Invalid("jitter must be >= 0 and candidates > 0".into()));
        }
        Ok(())
    }
}

/// `(best - mu - jitter) Phi(z) + sigma phi(z)`, zero when the posterior is degenerate.
pub fn expected_improvement(model: &GpModel, x: &[f64], best_y: f64, jitter: f64) -> f64 {
    let (mu, var) = model.predict(x);
    ei_from_moments(mu, var.sqrt(), best_y, jitter)
}

pub fn ei_from_moments(mu: f64, sigma: f64, best_y: f64, jitter: f64) -> f64 {
    let imp = best_y - mu - jitter;
    if !(sigma > 0.0) {
        return imp.max(0.0);
    }
    let z = imp / sigma;
    let n = Normal::standard();
    (imp * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Seeded Latin hypercube sample in the box.
pub fn latin_hypercube<R: Rng>(n: usize, bounds: &[[f64; 2]], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; bounds.len()]; n];
    for (d, b) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / n as f64;
            pts[i][d] = b[0] + u * (b[1] - b[0]);
        }
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoEvaluation {
    pub eval: usize,
    pub x: Vec<f64>,
    pub objective: f64,
    pub best_so_far: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoResult {
    pub best_x: Vec<f64>,
    pub best_y: f64,
    pub best_eval: usize,
    pub history: Vec<BoEvaluation>,
}

impl BoResult {
    /// `eval,logQ,logR,objective,best_so_far,wall_s` for two dimensions,
    /// `w1..wn` coordinates otherwise.
    pub fn write_csv<W: Write>(&self, writer: W, include_wall: bool) -> Result<(), BoError> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.best_x.len();
        let mut header = vec!["eval".to_string()];
        if d == 2 {
            header.extend(["logQ".to_string(), "logR".to_string()]);
        } else {
            header.extend((1..=d).map(|i| format!("w{i}")));
        }
        header.extend(["objective".into(), "best_so_far".into()]);
        if include_wall {
            header.push("wall_s".into());
        }
        w.write_record(&header)?;
        for e in &self.history {
            let mut rec = vec![e.eval.to_string()];
            rec.extend(e.x.iter().map(f64::to_string));
            rec.push(e.objective.to_string());
            rec.push(e.best_so_far.to_string());
            if include_wall {
                rec.push(e.wall_s.to_string());
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample standard deviation, 1 when the values are constant.
fn spread(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

fn clamp_to(bounds: &[[f64; 2]], x: &[f64]) -> Vec<f64> {
    x.iter().zip(bounds).map(|(v, b)| v.clamp(b[0], b[1])).collect()
}

/// Maximizes EI over random candidates followed by a local simplex polish.
/// Returns the maximizer and its EI.
fn propose(model: &GpModel, cfg: &BoConfig, best_y: f64, jitter: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let b = &cfg.bounds;
    let mut scored: Vec<(f64, Vec<f64>)> = (0..cfg.candidates)
        .map(|_| {
            let x: Vec<f64> = b.iter().map(|r| rng.random_range(r[0]..=r[1])).collect();
            (expected_improvement(model, &x, best_y, jitter), x)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = scored[0].clone();
    let scale = b.iter().map(|r| r[1] - r[0]).fold(f64::INFINITY, f64::min);
    for (_, x0) in scored.iter().take(cfg.polish) {
        let res = nelder_mead(|x| -expected_improvement(model, &clamp_to(b, x), best_y, jitter), x0, 0.05 * scale, 100, 1e-12);
        if -res.f > best.0 {
            best = (-res.f, clamp_to(b, &res.x));
        }
    }
    (best.1, best.0)
}

/// Minimizes `objective` over the box with a fixed evaluation budget.
/// Failed evaluations are recorded as `+inf` and replaced by the worst
/// finite observation when fitting the surrogate.
pub fn bo_minimize<F, E>(mut objective: F, cfg: &BoConfig) -> Result<BoResult, BoError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: Display,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(cfg.budget);
    let mut ys: Vec<f64> = Vec::with_capacity(cfg.budget);
    let mut history = Vec::with_capacity(cfg.budget);
    let mut best = f64::INFINITY;

    let mut record = |x: Vec<f64>, xs: &mut Vec<Vec<f64>>, ys: &mut Vec<f64>, history: &mut Vec<BoEvaluation>| {
        let y = match objective(&x) {
            Ok(v) if !v.is_nan() => v,
            Ok(_) => {
                log::warn!("objective returned NaN at {x:?}");
                f64::INFINITY
            }
            Err(e) => {
                log::warn!("objective failed at {x:?}: {e}");
                f64::INFINITY
            }
        };
        best = best.min(y);
        history.push(BoEvaluation {
            eval: history.len() + 1,
            x: x.clone(),
            objective: y,
            best_so_far: best,
            wall_s: started.elapsed().as_secs_f64(),
        });
        xs.push(x);
        ys.push(y);
    };

    for x in latin_hypercube(cfg.init_design, &cfg.bounds, &mut rng) {
        record(x, &mut xs, &mut ys, &mut history);
    }

    while history.len() < cfg.budget {
        let worst = ys.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
        let fill = if worst.is_nan() { 1e6 } else { worst };
        let y_fit: Vec<f64> = ys.iter().map(|&v| if v.is_finite() { v } else { fill }).collect();
        let fit_opts = FitOptions { seed: cfg.seed.wrapping_add(history.len() as u64), ..cfg.fit };
        let model = gp_fit(&xs, &y_fit, &fit_opts)?;
        let incumbent = y_fit.iter().copied().fold(f64::INFINITY, f64::min);

        // Jitter and the exploration test are in units of the observed spread.
        let y_scale = spread(&y_fit);
        let explored = |x: &[f64]| {
            let (mu, var) = model.predict(x);
            var < MIN_PROPOSAL_VAR * y_scale * y_scale && mu >= incumbent
        };
        let mut jitter = cfg.jitter;
        let (mut x, ei) = propose(&model, cfg, incumbent, jitter * y_scale, &mut rng);
        if ei <= 0.0 && jitter > 0.0 {
            // The jitter exceeds every predicted improvement.
            x = propose(&model, cfg, incumbent, 0.0, &mut rng).0;
        }
        for _ in 0..4 {
            if !explored(&x) {
                break;
            }
            jitter = if jitter > 0.0 { jitter * 10.0 } else { 0.01 };
            log::debug!("proposal already explored; raising EI jitter to {jitter}");
            x = propose(&model, cfg, incumbent, jitter * y_scale, &mut rng).0;
        }
        record(x, &mut xs, &mut ys, &mut history);
    }

    let best_idx = (0..ys.len()).min_by(|&a, &b| ys[a].total_cmp(&ys[b])).expect("budget >= 2");
    Ok(BoResult {
        best_x: xs[best_idx].clone(),
        best_y: ys[best_idx],
        best_eval: best_idx + 1,
        history,
    })
}
