//! Dense box-constrained convex QP: `min g'x + 1/2 x'Hx  s.t.  lb <= x <= ub`.
//!
//! Primal active-set method. `lb <= 0 <= ub` must hold so that `x = 0` is a
//! feasible starting point, which is always the case for a step computed
//! around a feasible iterate.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Solves the QP. `H` must be symmetric positive definite.
///
/// Returns the minimizer and the number of working-set changes.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> (DVector<f64>, usize) {
    let n = g.len();
    debug_assert!(h.nrows() == n && h.ncols() == n);
    debug_assert!((0..n).all(|i| lb[i] <= 0.0 && 0.0 <= ub[i]));

    let mut x = DVector::zeros(n);
    let mut state = vec![Bound::Free; n];
    let scale = h.diagonal().amax().max(g.amax()).max(1.0);
    let max_changes = 4 * n + 20;

    for changes in 0..max_changes {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
        // Minimizer over the current face.
        let candidate = if free.is_empty() {
            DVector::zeros(0)
        } else {
            let m = free.len();
            let mut hff = DMatrix::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            for (a, &i) in free.iter().enumerate() {
                let mut r = -g[i];
                for j in 0..n {
                    if state[j] != Bound::Free {
                        r -= h[(i, j)] * x[j];
                    }
                }
                rhs[a] = r;
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = h[(i, j)];
                }
            }
            solve_spd(hff, rhs)
        };

        // Longest feasible step towards the candidate.
        let mut alpha = 1.0;
        let mut blocking = None;
        for (a, &i) in free.iter().enumerate() {
            let p = candidate[a] - x[i];
            if p < 0.0 && x[i] + p < lb[i] {
                let t = (lb[i] - x[i]) / p;
                if t < alpha {
                    alpha = t;
                    blocking = Some((i, Bound::Lower));
                }
            } else if p > 0.0 && x[i] + p > ub[i] {
                let t = (ub[i] - x[i]) / p;
                if t < alpha {
                    alpha = t;
                    blocking = Some((i, Bound::Upper));
                }
            }
        }
        for (a, &i) in free.iter().enumerate() {
            x[i] += alpha * (candidate[a] - x[i]);
        }
        if let Some((i, side)) = blocking {
            state[i] = side;
            x[i] = if side == Bound::Lower { lb[i] } else { ub[i] };
            continue;
        }

        // Stationary on the face: release the worst multiplier, if any.
        let grad = h * &x + g;
        let tol = 1e-12 * scale;
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            let viol = match state[i] {
                Bound::Lower => -grad[i],
                Bound::Upper => grad[i],
                Bound::Free => continue,
            };
            if viol > tol && worst.is_none_or(|(_, w)| viol > w) {
                worst = Some((i, viol));
            }
        }
        match worst {
            Some((i, _)) => state[i] = Bound::Free,
            None => return (x, changes),
        }
    }
    (x, max_changes)
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(&b);
    }
    // Numerically semidefinite block: add a relative Levenberg shift.
    let mut shift = 1e-12 * a.diagonal().amax().max(1e-300);
    loop {
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += shift;
        }
        if let Some(ch) = shifted.cholesky() {
            return ch.solve(&b);
        }
        shift *= 10.0;
    }
}
