//! Lyapunov machinery for the input recursion: the linear selection operator,
//! the block LMIs in natural parameters, feasibility certificates, and a
//! Monte-Carlo contraction check.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{self, max_eig_sym, min_eig_sym};
use crate::model::{HistoryLayout, NaturalParams};

/// Verify the layout contract required by the stability path: a single input
/// lag occupying the leading slots.
pub fn check_stability_layout(layout: &HistoryLayout, n_u: usize) -> Result<()> {
    if layout.t_u != 1 {
        return Err(Error::Layout(format!(
            "stability constraints require t_u = 1 (got t_u = {}); block-companion \
             lifting is out of scope",
            layout.t_u
        )));
    }
    if layout.n_u != n_u {
        return Err(Error::Layout(format!(
            "layout has n_u = {}, parameters have n_u = {n_u}",
            layout.n_u
        )));
    }
    Ok(())
}

/// `S(C_i)`: the first `n_u` columns of `C_i`, equal to `Λ_i A_i`.
pub fn select_s(coeff: &DMatrix<f64>, n_u: usize) -> DMatrix<f64> {
    coeff.view((0, 0), (n_u, n_u)).into_owned()
}

/// `A_i = Λ_i⁻¹ S(C_i)`: the input-to-input block of the gain matrix.
pub fn select_a(nat: &NaturalParams, i: usize, layout: &HistoryLayout) -> Result<DMatrix<f64>> {
    let mode = nat
        .modes
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("mode {i} out of range")))?;
    let n_u = mode.n_u();
    check_stability_layout(layout, n_u)?;
    let chol = math::cholesky(&mode.precision, &format!("precision of mode {i}"))?;
    Ok(chol.solve(&select_s(&mode.coeff, n_u)))
}

/// The input-to-input block read directly off a gain matrix `K = [A B]`.
pub fn select_a_from_gains(gain: &DMatrix<f64>) -> DMatrix<f64> {
    let n_u = gain.nrows();
    gain.view((0, 0), (n_u, n_u)).into_owned()
}

/// Assemble the symmetric block `[[P, S(C)ᵀ], [S(C), 2Λ − P]]`.
pub fn lmi_block(
    coeff: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n_u = lambda.nrows();
    if lambda.ncols() != n_u || p.nrows() != n_u || p.ncols() != n_u || coeff.nrows() != n_u {
        return Err(Error::InvalidArgument("LMI block shape mismatch".into()));
    }
    if coeff.ncols() < n_u {
        return Err(Error::InvalidArgument(
            "coefficient matrix narrower than its input block".into(),
        ));
    }
    let s = select_s(coeff, n_u);
    let mut block = DMatrix::zeros(2 * n_u, 2 * n_u);
    block.view_mut((0, 0), (n_u, n_u)).copy_from(p);
    block.view_mut((0, n_u), (n_u, n_u)).copy_from(&s.transpose());
    block.view_mut((n_u, 0), (n_u, n_u)).copy_from(&s);
    block
        .view_mut((n_u, n_u), (n_u, n_u))
        .copy_from(&(2.0 * lambda - p));
    Ok(block)
}

/// A common-Lyapunov certificate: the matrix `P`, the smallest eigenvalue of
/// each block LMI, and the largest eigenvalue of each direct Lyapunov
/// difference `A_iᵀPA_i − P` (all negative when valid).
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub p: DMatrix<f64>,
    pub epsilon: f64,
    pub p_min_eig: f64,
    pub block_margins: Vec<f64>,
    pub direct_margins: Vec<f64>,
}

impl StabilityCertificate {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "p": crate::model::MatrixJson::from_matrix(&self.p),
            "epsilon": self.epsilon,
            "p_min_eig": self.p_min_eig,
            "block_margins": self.block_margins,
            "direct_margins": self.direct_margins,
        })
    }
}

/// Outcome of a feasibility check; the infeasible arm carries the same
/// margins for diagnosis.
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Feasible(StabilityCertificate),
    Infeasible {
        epsilon: f64,
        p_min_eig: f64,
        block_margins: Vec<f64>,
        direct_margins: Vec<f64>,
    },
}

impl Feasibility {
    pub fn certificate(self) -> Option<StabilityCertificate> {
        match self {
            Feasibility::Feasible(c) => Some(c),
            Feasibility::Infeasible { .. } => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible(_))
    }
}

/// Eigenvalue margins of every block LMI and of `P`, with the direct
/// Lyapunov inequality evaluated as a cross-check.
pub fn check_feasibility(
    nat: &NaturalParams,
    p: &DMatrix<f64>,
    epsilon: f64,
    layout: &HistoryLayout,
) -> Result<Feasibility> {
    if nat.modes.is_empty() {
        return Err(Error::InvalidArgument("no modes".into()));
    }
    let n_u = nat.modes[0].n_u();
    check_stability_layout(layout, n_u)?;
    if (p - p.transpose()).norm() > 1e-9 * (1.0 + p.norm()) {
        return Err(Error::InvalidArgument("P is not symmetric".into()));
    }
    let p_min_eig = min_eig_sym(p);
    let mut block_margins = Vec::with_capacity(nat.d());
    let mut direct_margins = Vec::with_capacity(nat.d());
    for (i, mode) in nat.modes.iter().enumerate() {
        let block = lmi_block(&mode.coeff, &mode.precision, p)?;
        block_margins.push(min_eig_sym(&block));
        let a = select_a(nat, i, layout)?;
        direct_margins.push(max_eig_sym(&(a.transpose() * p * &a - p)));
    }
    let feasible =
        p_min_eig >= epsilon && block_margins.iter().all(|&m| m >= epsilon);
    if feasible {
        Ok(Feasibility::Feasible(StabilityCertificate {
            p: p.clone(),
            epsilon,
            p_min_eig,
            block_margins,
            direct_margins,
        }))
    } else {
        Ok(Feasibility::Infeasible { epsilon, p_min_eig, block_margins, direct_margins })
    }
}

/// Simulate the autonomous input recursion `u_t = A_{ξ_t} u_{t−1}` under
/// random mode switching and report the largest observed one-step ratio
/// `‖u_t‖_P / ‖u_{t−1}‖_P`. Strictly below 1 whenever a certificate holds.
pub fn contraction_rollout_test(
    a_set: &[DMatrix<f64>],
    p: &DMatrix<f64>,
    n_steps: usize,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    if a_set.is_empty() {
        return Err(Error::InvalidArgument("no mode matrices".into()));
    }
    let n_u = a_set[0].nrows();
    let p_chol = math::cholesky(p, "Lyapunov P")?;
    // ‖u‖_P = ‖Lᵀ u‖ with P = L Lᵀ.
    let lt = p_chol.l().transpose();
    let p_norm = |u: &DVector<f64>| -> f64 { (&lt * u).norm() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..n_trials {
        let mut u = DVector::from_fn(n_u, |_, _| rng.gen_range(-1.0..1.0));
        if u.norm() == 0.0 {
            continue;
        }
        let mut prev = p_norm(&u);
        for _ in 0..n_steps {
            let mode = rng.gen_range(0..a_set.len());
            u = &a_set[mode] * u;
            let cur = p_norm(&u);
            let ratio = if prev == 0.0 { 0.0 } else { cur / prev };
            max_ratio = max_ratio.max(ratio);
            prev = cur;
        }
    }
    Ok(max_ratio)
}
