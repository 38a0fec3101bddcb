//! Projected Gauss-Newton SQP for the condensed tracking problem.
//!
//! Decision variable: the stacked input sequence `U = [u_0; ...; u_{N-1}]`.
//! Predictions use the Euler model `q_{k+1} = q_k + Ts u_k` and the tracked
//! output of stage `k` is `p(q_{k+1})`. Input boxes are handled exactly by the
//! QP subproblem; position bounds enter as a quadratic penalty and are enforced
//! exactly afterwards by a forward repair pass.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};

use super::qp::solve_box_qp;
use super::{CftocSolution, KinematicModel, NmpcConfig, NmpcError, SolveStatus};

/// Stage-wise tracking objective
/// `sum_k |p_k - target_k|^2_{W_k} + |u_k - u_{k-1}|^2_R`.
#[derive(Debug, Clone, Copy)]
pub struct TrackingCost<'a> {
    pub targets: &'a [Vector3<f64>],
    /// Diagonal of the position weight per stage.
    pub stage_weights: &'a [Vector3<f64>],
    /// Diagonal of the input-rate weight.
    pub rate_weights: &'a [f64],
}

struct Eval {
    /// Predicted joint positions q_1..q_N, row-major per stage.
    q: Vec<f64>,
    p: Vec<Vector3<f64>>,
    objective: f64,
}

struct Problem<'a, M: ?Sized> {
    model: &'a M,
    cfg: &'a NmpcConfig,
    cost: TrackingCost<'a>,
    q0: &'a [f64],
    u_prev: &'a [f64],
    n: usize,
    horizon: usize,
}

impl<M: KinematicModel + ?Sized> Problem<'_, M> {
    fn ts(&self) -> f64 {
        self.cfg.settings.ts_s
    }

    fn violation(&self, i: usize, q: f64) -> f64 {
        let lim = &self.cfg.limits;
        if q > lim.q_max[i] {
            q - lim.q_max[i]
        } else if q < lim.q_min[i] {
            q - lim.q_min[i]
        } else {
            0.0
        }
    }

    fn evaluate(&self, u: &[f64]) -> Eval {
        let (n, nh, ts) = (self.n, self.horizon, self.ts());
        let rho = self.cfg.settings.state_penalty;
        let mut q = Vec::with_capacity(n * nh);
        let mut p = Vec::with_capacity(nh);
        let mut cur = self.q0.to_vec();
        let mut obj = 0.0;
        for k in 0..nh {
            for i in 0..n {
                cur[i] += ts * u[k * n + i];
            }
            let pk = self.model.position(&cur);
            let d = pk - self.cost.targets[k];
            let w = &self.cost.stage_weights[k];
            obj += w[0] * d[0] * d[0] + w[1] * d[1] * d[1] + w[2] * d[2] * d[2];
            for i in 0..n {
                let prev = if k == 0 { self.u_prev[i] } else { u[(k - 1) * n + i] };
                let du = u[k * n + i] - prev;
                obj += self.cost.rate_weights[i] * du * du;
                let v = self.violation(i, cur[i]);
                obj += rho * v * v;
            }
            q.extend_from_slice(&cur);
            p.push(pk);
        }
        Eval { q, p, objective: obj }
    }

    /// Gauss-Newton model `(H, g)` with `f(U + d) ~ f + 2 g'd + d'Hd`.
    fn gauss_newton(&self, u: &[f64], ev: &Eval) -> (DMatrix<f64>, DVector<f64>) {
        let (n, nh, ts) = (self.n, self.horizon, self.ts());
        let rho = self.cfg.settings.state_penalty;
        let dim = n * nh;

        // Per-stage curvature M_k and gradient v_k of the tracking and penalty terms.
        let mut stage_m = Vec::with_capacity(nh);
        let mut stage_v = Vec::with_capacity(nh);
        for k in 0..nh {
            let qk = &ev.q[k * n..(k + 1) * n];
            let jac = self.model.position_jacobian(qk);
            let w = &self.cost.stage_weights[k];
            let d = ev.p[k] - self.cost.targets[k];
            let mut wj = jac.clone();
            for c in 0..3 {
                wj.row_mut(c).scale_mut(w[c]);
            }
            let mut m = jac.transpose() * &wj * (ts * ts);
            let wd = Vector3::new(w[0] * d[0], w[1] * d[1], w[2] * d[2]);
            let mut v = jac.transpose() * wd * ts;
            for i in 0..n {
                let viol = self.violation(i, qk[i]);
                if viol != 0.0 {
                    m[(i, i)] += rho * ts * ts;
                    v[i] += rho * ts * viol;
                }
            }
            stage_m.push(m);
            stage_v.push(v);
        }
        // Suffix sums: input u_j influences every stage k >= j.
        for k in (0..nh.saturating_sub(1)).rev() {
            let (head, tail) = stage_m.split_at_mut(k + 1);
            head[k] += &tail[0];
            let (head, tail) = stage_v.split_at_mut(k + 1);
            head[k] += &tail[0];
        }

        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for j in 0..nh {
            for l in 0..nh {
                let block = &stage_m[j.max(l)];
                h.view_mut((j * n, l * n), (n, n)).copy_from(block);
            }
            g.rows_mut(j * n, n).copy_from(&stage_v[j]);
        }
        // Input-rate term.
        for k in 0..nh {
            for i in 0..n {
                let r = self.cost.rate_weights[i];
                let idx = k * n + i;
                let prev = if k == 0 { self.u_prev[i] } else { u[idx - n] };
                g[idx] += r * (u[idx] - prev);
                h[(idx, idx)] += r;
                if k + 1 < nh {
                    g[idx] -= r * (u[idx + n] - u[idx]);
                    h[(idx, idx)] += r;
                    h[(idx, idx + n)] -= r;
                    h[(idx + n, idx)] -= r;
                }
            }
        }
        (h, g)
    }

    fn input_bounds(&self, i: usize) -> (f64, f64) {
        (self.cfg.limits.qdot_min[i], self.cfg.limits.qdot_max[i])
    }

    /// Projected-gradient stationarity measure `|U - P(U - grad)|_inf`.
    fn kkt_residual(&self, u: &[f64], g_half: &DVector<f64>) -> f64 {
        let mut res: f64 = 0.0;
        for (idx, &ui) in u.iter().enumerate() {
            let (lo, hi) = self.input_bounds(idx % self.n);
            let projected = (ui - 2.0 * g_half[idx]).clamp(lo, hi);
            res = res.max((ui - projected).abs());
        }
        res
    }

    /// Clamps inputs stage by stage so every predicted position stays in bounds.
    fn repair(&self, u: &mut [f64]) -> bool {
        let (n, ts) = (self.n, self.ts());
        let lim = &self.cfg.limits;
        let mut cur = self.q0.to_vec();
        let mut changed = false;
        for k in 0..self.horizon {
            for i in 0..n {
                let idx = k * n + i;
                let lo = ((lim.q_min[i] - cur[i]) / ts).max(lim.qdot_min[i]);
                let hi = ((lim.q_max[i] - cur[i]) / ts).min(lim.qdot_max[i]);
                let v = u[idx].clamp(lo, hi);
                if v != u[idx] {
                    u[idx] = v;
                    changed = true;
                }
                cur[i] = (cur[i] + ts * u[idx]).clamp(lim.q_min[i], lim.q_max[i]);
            }
        }
        changed
    }
}

/// Solves one tracking subproblem starting from `init` (projected onto the
/// input box) or, when absent, from `u_prev` held over the horizon.
pub fn solve_tracking<M: KinematicModel + ?Sized>(
    model: &M,
    cfg: &NmpcConfig,
    cost: TrackingCost<'_>,
    q0: &[f64],
    u_prev: &[f64],
    init: Option<&[f64]>,
) -> Result<CftocSolution, NmpcError> {
    let started = Instant::now();
    let n = model.dof();
    let horizon = cfg.settings.horizon;
    if cost.targets.len() != horizon || cost.stage_weights.len() != horizon {
        return Err(NmpcError::Dimension(format!(
            "expected {horizon} reference points, got {}",
            cost.targets.len()
        )));
    }
    if q0.len() != n || u_prev.len() != n || cost.rate_weights.len() != n || cfg.limits.dof() != n {
        return Err(NmpcError::Dimension(format!("model has {n} joints")));
    }
    let prob = Problem { model, cfg, cost, q0, u_prev, n, horizon };
    let s = &cfg.settings;

    let mut u: Vec<f64> = match init {
        Some(w) if w.len() == n * horizon => w.to_vec(),
        Some(w) => {
            return Err(NmpcError::Dimension(format!("warm start has {} entries", w.len())));
        }
        None => (0..horizon).flat_map(|_| u_prev.iter().copied()).collect(),
    };
    for (idx, ui) in u.iter_mut().enumerate() {
        let (lo, hi) = prob.input_bounds(idx % n);
        *ui = ui.clamp(lo, hi);
    }

    let mut ev = prob.evaluate(&u);
    let mut trace = vec![ev.objective];
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;

    for _ in 0..=s.max_sqp_iters {
        let (h, g) = prob.gauss_newton(&u, &ev);
        kkt = prob.kkt_residual(&u, &g);
        if kkt <= s.kkt_tol {
            status = SolveStatus::Converged;
            break;
        }
        if iterations == s.max_sqp_iters {
            break;
        }
        let dim = u.len();
        let mut lb = DVector::zeros(dim);
        let mut ub = DVector::zeros(dim);
        for idx in 0..dim {
            let (lo, hi) = prob.input_bounds(idx % n);
            lb[idx] = (lo - u[idx]).min(0.0);
            ub[idx] = (hi - u[idx]).max(0.0);
        }
        let (d, _) = solve_box_qp(&h, &g, &lb, &ub);
        // Directional derivative of f along d.
        let slope = 2.0 * g.dot(&d);
        let f0 = ev.objective;
        if slope >= 0.0 || -slope <= 1e-15 * f0.abs().max(1e-300) || d.amax() <= 1e-15 {
            status = SolveStatus::PrecisionLimit;
            break;
        }

        let mut t = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = u.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            let trial_ev = prob.evaluate(&trial);
            if trial_ev.objective <= f0 + s.armijo_c * t * slope {
                break Some((trial, trial_ev));
            }
            t *= s.backtrack;
            if t < s.min_step {
                break None;
            }
        };
        match accepted {
            Some((trial, trial_ev)) => {
                u = trial;
                ev = trial_ev;
                trace.push(ev.objective);
                iterations += 1;
            }
            None => {
                // Rounding-level decrease cannot be resolved by the line search.
                if -slope <= 1e-10 * f0.abs().max(1.0) {
                    status = SolveStatus::PrecisionLimit;
                    break;
                }
                return Err(NmpcError::SolverStall { iterations, kkt_residual: kkt });
            }
        }
    }

    let state_repaired = prob.repair(&mut u);
    if state_repaired {
        ev = prob.evaluate(&u);
    }

    let inputs = DMatrix::from_row_slice(horizon, n, &u);
    let predicted_q = DMatrix::from_row_slice(horizon, n, &ev.q);
    Ok(CftocSolution {
        inputs,
        predicted_q,
        predicted_p: ev.p,
        objective: ev.objective,
        status,
        iterations,
        kkt_residual: kkt,
        state_repaired,
        objective_trace: trace,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
