//! Sequential minimal optimization for the epsilon-SVR dual.
//!
//! The dual is written over `2l` variables: `alpha_t` for `t < l` (sign
//! `+1`, linear term `epsilon - z_t`) and `alpha*_t` for `t >= l` (sign
//! `-1`, linear term `epsilon + z_t`), all boxed in `[0, C]` with
//! `sum_t y_t alpha_t = 0`. Working pairs are chosen with second order
//! information; the scan order is fixed so a solve is fully deterministic.

const TAU: f64 = 1e-12;

pub(crate) struct Solution {
    /// `alpha_i - alpha*_i` for each training row.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Maximal KKT violation at exit.
    pub gap: f64,
    pub converged: bool,
}

pub(crate) struct Problem<'a> {
    /// Row-major `l x l` kernel matrix.
    pub kernel: &'a [f64],
    pub targets: &'a [f64],
    pub c: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

pub(crate) fn solve(p: &Problem<'_>) -> Solution {
    let l = p.targets.len();
    let n = 2 * l;
    let k = |a: usize, b: usize| p.kernel[(a % l) * l + b % l];
    let sign = |t: usize| if t < l { 1.0 } else { -1.0 };
    // Q_ab = y_a y_b K_ab
    let q = |a: usize, b: usize| sign(a) * sign(b) * k(a, b);

    let mut alpha = vec![0.0; n];
    let mut grad: Vec<f64> = (0..n)
        .map(|t| {
            if t < l {
                p.epsilon - p.targets[t]
            } else {
                p.epsilon + p.targets[t - l]
            }
        })
        .collect();
    let diag: Vec<f64> = (0..n).map(|t| k(t, t)).collect();
    let c = p.c;

    let mut iterations = 0;
    let mut gap;
    let mut converged = false;
    loop {
        // i maximizes -y_t G_t over the "up" set
        let mut g_max = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            let up = if t < l { alpha[t] < c } else { alpha[t] > 0.0 };
            if up {
                let v = -sign(t) * grad[t];
                if v >= g_max {
                    g_max = v;
                    i = t;
                }
            }
        }

        let mut g_max2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            let low = if t < l { alpha[t] > 0.0 } else { alpha[t] < c };
            if !low {
                continue;
            }
            let v = sign(t) * grad[t];
            if v >= g_max2 {
                g_max2 = v;
            }
            if i == usize::MAX {
                continue;
            }
            let grad_diff = g_max + v;
            if grad_diff > 0.0 {
                let quad = diag[i] + diag[t] - 2.0 * k(i, t);
                let quad = if quad > 0.0 { quad } else { TAU };
                let obj = -(grad_diff * grad_diff) / quad;
                if obj <= best_obj {
                    best_obj = obj;
                    j = t;
                }
            }
        }

        gap = g_max + g_max2;
        if gap < p.tol || j == usize::MAX {
            converged = true;
            break;
        }
        if iterations >= p.max_iter {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = q(i, j);
        if sign(i) != sign(j) {
            let quad = diag[i] + diag[j] + 2.0 * qij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = diag[i] + diag[j] - 2.0 * qij;
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let di = sign(i) * (alpha[i] - old_i);
        let dj = sign(j) * (alpha[j] - old_j);
        let row_i = &p.kernel[(i % l) * l..(i % l + 1) * l];
        let row_j = &p.kernel[(j % l) * l..(j % l + 1) * l];
        let (head, tail) = grad.split_at_mut(l);
        for r in 0..l {
            let d = row_i[r] * di + row_j[r] * dj;
            head[r] += d;
            tail[r] -= d;
        }
    }

    Solution {
        coefficients: (0..l).map(|t| alpha[t] - alpha[t + l]).collect(),
        bias: -rho(&alpha, &grad, l, c),
        iterations,
        gap,
        converged,
    }
}

/// Offset of the decision function, averaged over free variables when any
/// exist and taken from the feasible interval midpoint otherwise.
fn rho(alpha: &[f64], grad: &[f64], l: usize, c: f64) -> f64 {
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut free = 0usize;
    let mut free_sum = 0.0;
    for (t, (&a, &g)) in alpha.iter().zip(grad).enumerate() {
        let positive = t < l;
        let yg = if positive { g } else { -g };
        if a >= c {
            if positive {
                lower = lower.max(yg);
            } else {
                upper = upper.min(yg);
            }
        } else if a <= 0.0 {
            if positive {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else {
        0.5 * (upper + lower)
    }
}
