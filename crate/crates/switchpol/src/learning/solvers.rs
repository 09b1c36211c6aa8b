//! Small self-contained optimizers used by the M-step solvers.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iters: 500, grad_tol: 1e-9 }
    }
}

pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Limited-memory BFGS with Armijo backtracking. The objective returns `None`
/// outside its domain; such points are rejected by the line search, so the
/// iterates never leave the feasible region they started in.
pub fn lbfgs_minimize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let (mut fx, mut gx) = f(&x0).ok_or_else(|| {
        Error::Solver("optimizer started outside the objective domain".into())
    })?;
    let mut x = x0;
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for iter in 0..opts.max_iters {
        let gnorm = gx.norm();
        if gnorm <= opts.grad_tol {
            return Ok(LbfgsOutcome { x, value: fx, grad_norm: gnorm, iterations: iter, converged: true });
        }

        // Two-loop recursion.
        let mut q = gx.clone();
        let m = s_hist.len();
        let mut alphas = vec![0.0f64; m];
        for i in (0..m).rev() {
            alphas[i] = rho_hist[i] * s_hist[i].dot(&q);
            q.axpy(-alphas[i], &y_hist[i], 1.0);
        }
        if m > 0 {
            let gamma = s_hist[m - 1].dot(&y_hist[m - 1]) / y_hist[m - 1].norm_squared();
            q *= gamma.max(1e-12);
        }
        for i in 0..m {
            let beta = rho_hist[i] * y_hist[i].dot(&q);
            q.axpy(alphas[i] - beta, &s_hist[i], 1.0);
        }
        let mut dir = -q;
        let mut slope = gx.dot(&dir);
        if slope >= 0.0 {
            dir = -gx.clone();
            slope = gx.dot(&dir);
        }

        // Armijo backtracking; infeasible trial points are treated as +inf.
        let mut t = 1.0f64;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + t * &dir;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No admissible step: report the best point found so far.
            return Ok(LbfgsOutcome {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: gnorm <= opts.grad_tol,
            });
        };

        let s = &x_new - &x;
        let yv = &g_new - &gx;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
    }
    let gnorm = gx.norm();
    Ok(LbfgsOutcome {
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: opts.max_iters,
        converged: gnorm <= opts.grad_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &DVector<f64>| {
            let v = 0.5 * (x[0] - 2.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            let g = DVector::from_row_slice(&[x[0] - 2.0, 4.0 * (x[1] + 1.0)]);
            Some((v, g))
        };
        let out = lbfgs_minimize(f, DVector::zeros(2), &LbfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.x[0], 2.0, epsilon = 1e-7);
        assert_abs_diff_eq!(out.x[1], -1.0, epsilon = 1e-7);
    }

    #[test]
    fn respects_domain_barrier() {
        // Minimize x − ln(x): domain x > 0, minimum at x = 1.
        let f = |x: &DVector<f64>| {
            if x[0] <= 0.0 {
                return None;
            }
            Some((x[0] - x[0].ln(), DVector::from_row_slice(&[1.0 - 1.0 / x[0]])))
        };
        let out = lbfgs_minimize(f, DVector::from_row_slice(&[3.0]), &LbfgsOptions::default())
            .unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn rosenbrock_to_tolerance() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_row_slice(&[
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Some((v, g))
        };
        let opts = LbfgsOptions { memory: 10, max_iters: 2000, grad_tol: 1e-10 };
        let out = lbfgs_minimize(f, DVector::from_row_slice(&[-1.2, 1.0]), &opts).unwrap();
        assert!(out.converged, "grad norm {}", out.grad_norm);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-6);
    }
}
