//! The gating block of the minimization step: damped Newton on the tied
//! parameters of the configured switching kind.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inference::SupervisedSequence;
use crate::math;
use crate::model::{Gating, SwitchingKind};

use super::surrogate::{
    gating_flatten, gating_unflatten, regularizer_gating, regularizer_gating_grad,
    GatingSurrogate, RegConfig, SurrogateWeights,
};

/// Minimize `surrogate_gating + r1` for the given switching kind, starting
/// from `warm` (zeros otherwise). Deterministic; returns the tied parameters
/// with gradient norm at most `grad_tol`.
pub fn solve_gating_step(
    data: &[SupervisedSequence],
    weights: &SurrogateWeights,
    kind: SwitchingKind,
    reg: &RegConfig,
    grad_tol: f64,
    warm: Option<&Gating>,
) -> Result<Gating> {
    let surr = GatingSurrogate::new(data, weights)?;
    let d = surr.d();
    let n_z = data[0].layout().n_z();
    let mut gating = match warm {
        Some(g) if g.kind() == kind => g.clone(),
        _ => Gating::zeros(kind, d, n_z),
    };

    const MAX_NEWTON: usize = 200;
    for _ in 0..MAX_NEWTON {
        let (v_surr, g_surr) = surr.value_and_grad(&gating)?;
        let value = v_surr + regularizer_gating(&gating, reg);
        let mut grad = gating_flatten(&g_surr);
        grad += gating_flatten(&regularizer_gating_grad(&gating, reg));
        if grad.norm() <= grad_tol {
            return Ok(gating);
        }

        let mut hess = hessian(&surr, data, weights, &gating)?;
        for k in 0..hess.nrows() {
            hess[(k, k)] += reg.gamma1;
        }
        let step = newton_direction(&hess, &grad)?;
        let slope = grad.dot(&step);

        // Backtracking on the regularized objective.
        let x0 = gating_flatten(&gating);
        let mut t = 1.0f64;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = gating_unflatten(kind, d, n_z, &(&x0 + t * &step));
            let v_trial = surr.value(&trial)? + regularizer_gating(&trial, reg);
            if v_trial <= value + 1e-4 * t * slope {
                gating = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::Solver(format!(
                "gating line search failed (kind {kind:?}, gradient norm {:.3e}, \
                 objective {value:.6e})",
                grad.norm()
            )));
        }
    }
    Err(Error::Solver(format!(
        "gating Newton did not reach gradient tolerance {grad_tol:.1e} in {MAX_NEWTON} iterations"
    )))
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    // The ridge makes the Hessian PD; jitter only guards exact-zero gamma1.
    let mut jitter = 0.0f64;
    for _ in 0..6 {
        let mut h = hess.clone();
        if jitter > 0.0 {
            for k in 0..h.nrows() {
                h[(k, k)] += jitter;
            }
        }
        if let Ok(chol) = math::cholesky(&h, "gating Hessian") {
            return Ok(-chol.solve(grad));
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 100.0 };
    }
    Err(Error::Solver("gating Hessian factorization failed".into()))
}

/// Exact Hessian of the gating surrogate (without the ridge), block-diagonal
/// across the independent tied blocks.
fn hessian(
    surr: &GatingSurrogate,
    data: &[SupervisedSequence],
    weights: &SurrogateWeights,
    gating: &Gating,
) -> Result<DMatrix<f64>> {
    let d = surr.d();
    match gating {
        Gating::Static(logits) => {
            let total_w: f64 = surr.pair_totals.sum();
            let mut sm = logits.clone();
            math::softmax_in_place(sm.as_mut_slice());
            Ok(total_w * softmax_curvature(&sm))
        }
        Gating::ModeDependent(rows) => {
            let mut h = DMatrix::zeros(d * d, d * d);
            for i in 0..d {
                let w_i: f64 = surr.pair_totals.row(i).sum();
                let mut sm = rows.row(i).transpose();
                math::softmax_in_place(sm.as_mut_slice());
                let block = w_i * softmax_curvature(&sm);
                h.view_mut((i * d, i * d), (d, d)).copy_from(&block);
            }
            Ok(h)
        }
        Gating::StateDependent(theta) => {
            let n_z = theta.nrows();
            let mut h = DMatrix::zeros(n_z * d, n_z * d);
            for (seq, w) in data.iter().zip(&weights.per_seq) {
                for t in 0..w.pairs.len() {
                    let z = &seq.z[t + 1].values;
                    let mut sm = theta.transpose() * z;
                    math::softmax_in_place(sm.as_mut_slice());
                    let m = softmax_curvature(&sm) / surr.denom;
                    add_kron_block(&mut h, 0, &m, z);
                }
            }
            Ok(h)
        }
        Gating::General(thetas) => {
            let n_z = thetas[0].nrows();
            let per = n_z * d;
            let mut h = DMatrix::zeros(per * d, per * d);
            for (seq, w) in data.iter().zip(&weights.per_seq) {
                for (t, pairs) in w.pairs.iter().enumerate() {
                    let z = &seq.z[t + 1].values;
                    for i in 0..d {
                        let w_i: f64 = pairs.row(i).sum();
                        if w_i == 0.0 {
                            continue;
                        }
                        let mut sm = thetas[i].transpose() * z;
                        math::softmax_in_place(sm.as_mut_slice());
                        let m = (w_i / surr.denom) * softmax_curvature(&sm);
                        add_kron_block(&mut h, i * per, &m, z);
                    }
                }
            }
            Ok(h)
        }
    }
}

/// `diag(σ) − σσᵀ`: the curvature of `lse` at softmax output `σ`.
fn softmax_curvature(sm: &DVector<f64>) -> DMatrix<f64> {
    let d = sm.len();
    let mut m = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            m[(a, b)] = if a == b { sm[a] * (1.0 - sm[a]) } else { -sm[a] * sm[b] };
        }
    }
    m
}

/// Accumulate `M ⊗ zzᵀ` into the square block of `h` starting at `offset`,
/// with column-major vec layout (slot `j·n_z + p`).
fn add_kron_block(h: &mut DMatrix<f64>, offset: usize, m: &DMatrix<f64>, z: &DVector<f64>) {
    let d = m.nrows();
    let n_z = z.len();
    for j1 in 0..d {
        for j2 in 0..d {
            let coef = m[(j1, j2)];
            if coef == 0.0 {
                continue;
            }
            let mut block = h.view_mut((offset + j1 * n_z, offset + j2 * n_z), (n_z, n_z));
            for p in 0..n_z {
                let zp = coef * z[p];
                for q in 0..n_z {
                    block[(p, q)] += zp * z[q];
                }
            }
        }
    }
}
