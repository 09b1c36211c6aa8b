//! The expert block of the minimization step: a closed-form solve in the
//! unconstrained case, and a log-det barrier path over the Lyapunov LMIs in
//! the stability-constrained case.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{self, spectral_norm};
use crate::model::{HistoryLayout, NaturalMode, NaturalParams};
use crate::stability::{self, lmi_block};

use super::solvers::{lbfgs_minimize, LbfgsOptions};
use super::surrogate::{
    regularizer_expert, regularizer_expert_grad, ExpertSurrogate, ModeStats, RegConfig,
};

/// Weighted ridge regression plus covariance update for one mode:
/// `B = S_uz (S_zz + γ3 I)⁻¹`,
/// `Σ = [Σw(ū−Bz̃)(ū−Bz̃)ᵀ + γ3 B Bᵀ + γ2 I] / (W + γ2)`.
pub fn ridge_expert(stats: &ModeStats, reg: &RegConfig) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nz1 = stats.szz.nrows();
    let n_u = stats.suu.nrows();
    let mut g = stats.szz.clone();
    for k in 0..nz1 {
        g[(k, k)] += reg.gamma3;
    }
    let g_chol = math::cholesky(&g, "regressor Gram matrix")?;
    // B G = S_uz  ⇔  G Bᵀ = S_uzᵀ.
    let b = g_chol.solve(&stats.suz.transpose()).transpose();
    let resid = &stats.suu - &b * stats.suz.transpose() - &stats.suz * b.transpose()
        + &b * &stats.szz * b.transpose();
    let mut sigma = resid + reg.gamma3 * &b * b.transpose();
    for k in 0..n_u {
        sigma[(k, k)] += reg.gamma2;
    }
    sigma /= stats.w_total + reg.gamma2;
    let sigma = 0.5 * (&sigma + sigma.transpose());
    Ok((b, sigma))
}

/// Closed-form minimizer of `surrogate_expert + r2`, one independent solve
/// per mode.
pub fn solve_expert_step_unconstrained(
    surr: &ExpertSurrogate,
    reg: &RegConfig,
) -> Result<NaturalParams> {
    let modes = surr
        .stats
        .iter()
        .map(|stats| {
            let (b, sigma) = ridge_expert(stats, reg)?;
            let chol = math::cholesky(&sigma, "expert covariance")?;
            let lambda = chol.inverse();
            let lambda = 0.5 * (&lambda + lambda.transpose());
            let coeff = chol.solve(&b);
            NaturalMode::new(coeff, lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NaturalParams { modes })
}

/// Barrier-path parameters for the stability-constrained expert step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BarrierConfig {
    pub epsilon_margin: f64,
    pub mu0: f64,
    pub shrink: f64,
    pub mu_final: f64,
    pub max_inner_iters: usize,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        BarrierConfig {
            epsilon_margin: 1e-6,
            mu0: 1e-2,
            shrink: 0.2,
            mu_final: 1e-8,
            max_inner_iters: 500,
        }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_margin > 0.0) {
            return Err(Error::InvalidArgument("epsilon_margin must be positive".into()));
        }
        if !(self.mu0 > 0.0 && self.mu_final > 0.0 && self.mu_final <= self.mu0) {
            return Err(Error::InvalidArgument("barrier path needs 0 < mu_final ≤ mu0".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument("barrier shrink must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

// --- symmetric packing -----------------------------------------------------

fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn pack_sym(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    let mut k = 0;
    for c in 0..n {
        for r in 0..=c {
            out[k] = m[(r, c)];
            k += 1;
        }
    }
}

fn unpack_sym(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for c in 0..n {
        for r in 0..=c {
            m[(r, c)] = v[k];
            m[(c, r)] = v[k];
            k += 1;
        }
    }
    m
}

/// Pack a symmetric-space gradient: off-diagonal slots move both mirrored
/// entries, so their packed derivative doubles.
fn pack_sym_grad(g: &DMatrix<f64>, out: &mut [f64]) {
    let n = g.nrows();
    let mut k = 0;
    for c in 0..n {
        for r in 0..=c {
            out[k] = if r == c { g[(r, c)] } else { 2.0 * g[(r, c)] };
            k += 1;
        }
    }
}

struct Packing {
    d: usize,
    n_u: usize,
    nz1: usize,
}

impl Packing {
    fn coeff_len(&self) -> usize {
        self.n_u * self.nz1
    }

    fn mode_len(&self) -> usize {
        self.coeff_len() + sym_len(self.n_u)
    }

    fn total_len(&self) -> usize {
        self.d * self.mode_len() + sym_len(self.n_u)
    }

    fn pack(&self, nat: &NaturalParams, p: &DMatrix<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.total_len());
        for (i, mode) in nat.modes.iter().enumerate() {
            let off = i * self.mode_len();
            x.as_mut_slice()[off..off + self.coeff_len()].copy_from_slice(mode.coeff.as_slice());
            pack_sym(
                &mode.precision,
                &mut x.as_mut_slice()[off + self.coeff_len()..off + self.mode_len()],
            );
        }
        let off = self.d * self.mode_len();
        pack_sym(p, &mut x.as_mut_slice()[off..]);
        x
    }

    /// Raw matrices; precision PD is not verified here.
    fn unpack(&self, x: &DVector<f64>) -> (Vec<(DMatrix<f64>, DMatrix<f64>)>, DMatrix<f64>) {
        let mut modes = Vec::with_capacity(self.d);
        for i in 0..self.d {
            let off = i * self.mode_len();
            let coeff = DMatrix::from_column_slice(
                self.n_u,
                self.nz1,
                &x.as_slice()[off..off + self.coeff_len()],
            );
            let lambda = unpack_sym(
                &x.as_slice()[off + self.coeff_len()..off + self.mode_len()],
                self.n_u,
            );
            modes.push((coeff, lambda));
        }
        let off = self.d * self.mode_len();
        let p = unpack_sym(&x.as_slice()[off..], self.n_u);
        (modes, p)
    }
}

/// Strictly feasible start: the unconstrained solution's gain blocks scaled
/// into the unit ball, identity precisions, identity `P`.
fn feasible_start(
    surr: &ExpertSurrogate,
    reg: &RegConfig,
    layout: &HistoryLayout,
    epsilon: f64,
) -> Result<(NaturalParams, DMatrix<f64>)> {
    let nat_u = solve_expert_step_unconstrained(surr, reg)?;
    let experts = nat_u.to_experts();
    let n_u = surr.n_u;
    let max_a = experts
        .iter()
        .map(|e| spectral_norm(&stability::select_a_from_gains(&e.gain)))
        .fold(0.0f64, f64::max);
    let scale = (0.9 / (max_a + 1e-9)).min(1.0);
    let modes = experts
        .iter()
        .map(|e| {
            // With Λ = I the coefficient matrix is just [K b].
            let mut coeff = DMatrix::zeros(n_u, surr.n_z + 1);
            coeff.view_mut((0, 0), (n_u, surr.n_z)).copy_from(&e.gain);
            coeff.column_mut(surr.n_z).copy_from(&e.offset);
            coeff.view_mut((0, 0), (n_u, n_u)).scale_mut(scale);
            NaturalMode::new(coeff, DMatrix::identity(n_u, n_u))
        })
        .collect::<Result<Vec<_>>>()?;
    let nat = NaturalParams { modes };
    let p = DMatrix::identity(n_u, n_u);
    let feas = stability::check_feasibility(&nat, &p, epsilon, layout)?;
    if !feas.is_feasible() {
        return Err(Error::StabilityInfeasible(format!(
            "scaled start is not strictly feasible (margins {feas:?})"
        )));
    }
    Ok((nat, p))
}

/// Minimize `surrogate_expert + r2` subject to `P ⪰ εI` and the block LMIs
/// `⪰ εI`, by a log-det barrier path (both barriers shifted by `ε/2` so every
/// interior point keeps margin at least `ε/2`).
pub fn solve_expert_step_stable(
    surr: &ExpertSurrogate,
    reg: &RegConfig,
    layout: &HistoryLayout,
    bar: &BarrierConfig,
    warm: Option<(&NaturalParams, &DMatrix<f64>)>,
) -> Result<(NaturalParams, DMatrix<f64>)> {
    bar.validate()?;
    let n_u = surr.n_u;
    stability::check_stability_layout(layout, n_u)?;
    let d = surr.stats.len();
    let pk = Packing { d, n_u, nz1: surr.n_z + 1 };
    let eps_half = 0.5 * bar.epsilon_margin;

    // Warm start only if it is strictly inside the shifted barriers.
    let start = match warm {
        Some((nat, p)) if warm_is_interior(nat, p, eps_half) => (nat.clone(), p.clone()),
        _ => feasible_start(surr, reg, layout, bar.epsilon_margin)?,
    };
    let mut x = pk.pack(&start.0, &start.1);

    let mut mu = bar.mu0;
    loop {
        let objective = |x: &DVector<f64>| barrier_objective(surr, reg, &pk, mu, eps_half, x);
        let opts = LbfgsOptions {
            memory: 12,
            max_iters: bar.max_inner_iters,
            grad_tol: (0.05 * mu).max(1e-9),
        };
        let out = lbfgs_minimize(objective, x, &opts)
            .map_err(|e| Error::Solver(format!("barrier stage μ={mu:.1e}: {e}")))?;
        if !out.value.is_finite() {
            return Err(Error::Solver(format!("barrier diverged at μ={mu:.1e}")));
        }
        x = out.x;
        if mu <= bar.mu_final {
            break;
        }
        mu = (mu * bar.shrink).max(bar.mu_final);
    }

    let (raw_modes, p) = pk.unpack(&x);
    let modes = raw_modes
        .into_iter()
        .map(|(c, l)| NaturalMode::new(c, l))
        .collect::<Result<Vec<_>>>()?;
    let nat = NaturalParams { modes };
    // The barrier keeps every margin strictly above ε/2; certify at that level.
    let feas = stability::check_feasibility(&nat, &p, eps_half * (1.0 - 1e-9), layout)?;
    if !feas.is_feasible() {
        return Err(Error::Solver(
            "barrier terminated at a point below the half-margin guarantee".into(),
        ));
    }
    Ok((nat, p))
}

fn warm_is_interior(nat: &NaturalParams, p: &DMatrix<f64>, eps_half: f64) -> bool {
    let n_u = nat.modes[0].n_u();
    let shift = DMatrix::identity(n_u, n_u) * eps_half;
    if math::cholesky(&(p - &shift), "P shift").is_err() {
        return false;
    }
    let shift2 = DMatrix::identity(2 * n_u, 2 * n_u) * eps_half;
    nat.modes.iter().all(|m| {
        math::cholesky(&m.precision, "Λ").is_ok()
            && lmi_block(&m.coeff, &m.precision, p)
                .map(|blk| math::cholesky(&(blk - &shift2), "block shift").is_ok())
                .unwrap_or(false)
    })
}

/// Value and gradient of `surrogate + r2 + μ·barrier` at packed coordinates,
/// or `None` outside the domain.
fn barrier_objective(
    surr: &ExpertSurrogate,
    reg: &RegConfig,
    pk: &Packing,
    mu: f64,
    eps_half: f64,
    x: &DVector<f64>,
) -> Option<(f64, DVector<f64>)> {
    let (raw_modes, p) = pk.unpack(x);
    let n_u = pk.n_u;

    let mut modes = Vec::with_capacity(pk.d);
    for (c, l) in &raw_modes {
        match NaturalMode::new(c.clone(), l.clone()) {
            Ok(m) => modes.push(m),
            Err(_) => return None,
        }
    }
    let nat = NaturalParams { modes };

    let p_shift = &p - DMatrix::identity(n_u, n_u) * eps_half;
    let p_chol = math::cholesky(&p_shift, "P barrier").ok()?;

    let (v_surr, g_surr) = surr.value_and_grad(&nat).ok()?;
    let v_reg = regularizer_expert(&nat, reg).ok()?;
    let g_reg = regularizer_expert_grad(&nat, reg).ok()?;

    let mut value = v_surr + v_reg;
    let mut grad = DVector::zeros(pk.total_len());
    let mut grad_p = DMatrix::zeros(n_u, n_u);

    // −μ ln det(P − (ε/2)I).
    let logdet_p =
        2.0 * p_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    value -= mu * logdet_p;
    grad_p -= mu * p_chol.inverse();

    let shift2 = DMatrix::identity(2 * n_u, 2 * n_u) * eps_half;
    for (i, (c, l)) in raw_modes.iter().enumerate() {
        let block = lmi_block(c, l, &p).ok()?;
        let chol = math::cholesky(&(block - &shift2), "block barrier").ok()?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        value -= mu * logdet;
        let w = chol.inverse();
        let w11 = w.view((0, 0), (n_u, n_u));
        let w21 = w.view((n_u, 0), (n_u, n_u));
        let w22 = w.view((n_u, n_u), (n_u, n_u));

        let mut grad_c = g_surr[i].0.clone() + &g_reg[i].0;
        // S(C) occupies the leading n_u columns of C.
        let mut s_block = grad_c.view_mut((0, 0), (n_u, n_u));
        s_block += -2.0 * mu * w21;
        let grad_l = &g_surr[i].1 + &g_reg[i].1 - 2.0 * mu * w22.into_owned();
        grad_p += mu * (w22.into_owned() - w11.into_owned());

        let off = i * pk.mode_len();
        grad.as_mut_slice()[off..off + pk.coeff_len()].copy_from_slice(grad_c.as_slice());
        pack_sym_grad(
            &grad_l,
            &mut grad.as_mut_slice()[off + pk.coeff_len()..off + pk.mode_len()],
        );
    }
    let off = pk.d * pk.mode_len();
    pack_sym_grad(&grad_p, &mut grad.as_mut_slice()[off..]);
    Some((value, grad))
}

/// Frobenius norm of the `(∂C, ∂Λ)` gradient of `surrogate_expert + r2`.
pub fn expert_gradient_norm(
    surr: &ExpertSurrogate,
    reg: &RegConfig,
    nat: &NaturalParams,
) -> Result<f64> {
    let (_, g_surr) = surr.value_and_grad(nat)?;
    let g_reg = regularizer_expert_grad(nat, reg)?;
    let mut sq = 0.0;
    for i in 0..nat.d() {
        sq += (&g_surr[i].0 + &g_reg[i].0).norm_squared();
        sq += (&g_surr[i].1 + &g_reg[i].1).norm_squared();
    }
    Ok(sq.sqrt())
}
