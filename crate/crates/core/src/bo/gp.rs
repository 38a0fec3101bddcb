//! Gaussian-process regression with an ARD Matérn 5/2 kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nelder_mead::nelder_mead;
use super::BoError;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Kernel and noise hyperparameters (natural units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Hyperparams {
    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            length_scales: v[..d].iter().map(|x| x.exp()).collect(),
            signal_var: v[d].exp(),
            noise_var: v[d + 1].exp(),
        }
    }
}

/// `s2 (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r)` with `r` the length-scaled distance.
pub fn matern52_ard(x1: &[f64], x2: &[f64], length_scales: &[f64], signal_var: f64) -> f64 {
    assert_eq!(x1.len(), length_scales.len());
    assert_eq!(x2.len(), length_scales.len());
    let r2: f64 = x1
        .iter()
        .zip(x2)
        .zip(length_scales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    let s5r = (5.0 * r2).sqrt();
    signal_var * (1.0 + s5r + 5.0 * r2 / 3.0) * (-s5r).exp()
}

/// Search box for the log-hyperparameters; targets are standardized first.
struct HyperBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl HyperBox {
    fn new(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let mut lo = Vec::with_capacity(d + 2);
        let mut hi = Vec::with_capacity(d + 2);
        for j in 0..d {
            let (mn, mx) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r[j]), b.max(r[j])));
            let range = (mx - mn).max(1e-3);
            lo.push((1e-2 * range).ln());
            hi.push((1e2 * range).ln());
        }
        lo.push(1e-4f64.ln());
        hi.push(1e2f64.ln());
        lo.push(1e-8f64.ln());
        hi.push(1.0f64.ln());
        Self { lo, hi }
    }

    fn clamp(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(self.lo.iter().zip(&self.hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub hyper: Hyperparams,
    /// Diagonal jitter added on top of the noise to make the factorization succeed.
    pub jitter: f64,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn kernel_matrix(x: &[Vec<f64>], h: &Hyperparams) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern52_ard(&x[i], &x[j], &h.length_scales, h.signal_var);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorizes `K + (noise + jitter) I`, escalating the jitter on failure.
fn factorize(x: &[Vec<f64>], h: &Hyperparams) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let k = kernel_matrix(x, h);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut kk = k.clone();
        for i in 0..x.len() {
            kk[(i, i)] += h.noise_var + jitter;
        }
        if let Some(c) = kk.cholesky() {
            return Some((c, jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 * h.signal_var.max(1e-12) } else { jitter * 10.0 };
    }
    None
}

fn nlml(x: &[Vec<f64>], ys: &DVector<f64>, h: &Hyperparams) -> f64 {
    match factorize(x, h) {
        Some((c, _)) => {
            let a = c.solve(ys);
            let logdet: f64 = c.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            0.5 * ys.dot(&a) + logdet + 0.5 * x.len() as f64 * LN_2PI
        }
        None => f64::INFINITY,
    }
}

impl GpModel {
    /// Builds the posterior for fixed hyperparameters.
    pub fn with_hyperparams(x: Vec<Vec<f64>>, y: Vec<f64>, hyper: Hyperparams) -> Result<Self, BoError> {
        let (y_mean, y_scale) = standardization(&y);
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));
        let (chol, jitter) = factorize(&x, &hyper).ok_or(BoError::IllConditioned)?;
        let alpha = chol.solve(&ys);
        Ok(Self { x, y, hyper, jitter, y_mean, y_scale, chol, alpha })
    }

    /// Posterior mean and latent variance at `x`, in the units of `y`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let h = &self.hyper;
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| matern52_ard(xi, x, &h.length_scales, h.signal_var)));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&ks).expect("Cholesky factor is nonsingular");
        let var = (h.signal_var - v.norm_squared()).max(0.0);
        (self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale)
    }

    /// Noise variance in the units of `y`.
    pub fn noise_var(&self) -> f64 {
        (self.hyper.noise_var + self.jitter) * self.y_scale * self.y_scale
    }

    /// Signal variance in the units of `y`.
    pub fn signal_var(&self) -> f64 {
        self.hyper.signal_var * self.y_scale * self.y_scale
    }

    pub fn neg_log_marginal_likelihood(&self) -> f64 {
        let ys = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| (v - self.y_mean) / self.y_scale));
        nlml(&self.x, &ys, &self.hyper)
    }
}

fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 })
}

/// Settings of the marginal-likelihood search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 8, max_iters: 200, seed: 0 }
    }
}

/// Fits hyperparameters by multi-start Nelder-Mead on the negative log
/// marginal likelihood in log-hyperparameter space.
pub fn gp_fit(x: &[Vec<f64>], y: &[f64], opts: &FitOptions) -> Result<GpModel, BoError> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(BoError::Invalid(format!("need >= 2 matching samples, got {} inputs and {} targets", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(BoError::Invalid("inconsistent input dimension".into()));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(BoError::Invalid("non-finite training data".into()));
    }
    let (y_mean, y_scale) = standardization(y);
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));
    let bx = HyperBox::new(x);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let objective = |v: &[f64]| nlml(x, &ys, &Hyperparams::from_log(&bx.clamp(v)));
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..opts.restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            let mid: Vec<f64> = (0..d).map(|j| 0.5 * (bx.lo[j] + bx.hi[j])).collect();
            mid.into_iter().chain([0.0, 1e-3f64.ln()]).collect()
        } else {
            bx.lo.iter().zip(&bx.hi).map(|(l, h)| rng.random_range(*l..*h)).collect()
        };
        let res = nelder_mead(&objective, &start, 1.0, opts.max_iters, 1e-10);
        let v = bx.clamp(&res.x);
        if best.as_ref().is_none_or(|(_, f)| res.f < *f) {
            best = Some((v, res.f));
        }
    }
    let (v, f) = best.expect("at least one restart");
    if !f.is_finite() {
        return Err(BoError::IllConditioned);
    }
    GpModel::with_hyperparams(x.to_vec(), y.to_vec(), Hyperparams::from_log(&v))
}
