//! Convex surrogate pieces built from smoothed posteriors: the gating term,
//! the expert term in natural parameters, and the regularizers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inference::{forward_backward, PosteriorMarginals, SupervisedSequence};
use crate::math::{self, lse_slice};
use crate::model::{Gating, NaturalParams, PolicyParams, SwitchingKind};

/// Posterior marginals snapshot taken at the current iterate, one per
/// sequence.
#[derive(Debug, Clone)]
pub struct SurrogateWeights {
    pub per_seq: Vec<PosteriorMarginals>,
}

impl SurrogateWeights {
    /// Run inference on every sequence; returns the weights and the summed
    /// log-likelihood.
    pub fn compute(
        data: &[SupervisedSequence],
        params: &PolicyParams,
        prior0: Option<&DVector<f64>>,
    ) -> Result<(Self, f64)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no sequences".into()));
        }
        let mut per_seq = Vec::with_capacity(data.len());
        let mut total = 0.0;
        for seq in data {
            let (post, ll) = forward_backward(seq, params, prior0)?;
            total += ll;
            per_seq.push(post);
        }
        Ok((SurrogateWeights { per_seq }, total))
    }

    pub fn d(&self) -> usize {
        self.per_seq[0].d()
    }
}

/// Total transition count across sequences, the shared normalizer.
pub fn transition_denominator(data: &[SupervisedSequence]) -> f64 {
    data.iter().map(|s| s.transition_count()).sum::<usize>() as f64
}

fn check_weights(data: &[SupervisedSequence], weights: &SurrogateWeights) -> Result<()> {
    if data.len() != weights.per_seq.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sequences but {} weight snapshots",
            data.len(),
            weights.per_seq.len()
        )));
    }
    for (seq, w) in data.iter().zip(&weights.per_seq) {
        if w.len() != seq.len() {
            return Err(Error::InvalidArgument(
                "weight snapshot length does not match its sequence".into(),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gating surrogate
// ---------------------------------------------------------------------------

/// The gating block of the surrogate: expected negative log transition
/// probability under the pair posteriors, averaged over transitions.
pub struct GatingSurrogate<'a> {
    data: &'a [SupervisedSequence],
    weights: &'a SurrogateWeights,
    /// `Σ_{s,t} q_{s,t}^{i,j} / denom`; sufficient for the static and
    /// mode-dependent kinds.
    pub pair_totals: DMatrix<f64>,
    pub denom: f64,
    d: usize,
}

impl<'a> GatingSurrogate<'a> {
    pub fn new(data: &'a [SupervisedSequence], weights: &'a SurrogateWeights) -> Result<Self> {
        check_weights(data, weights)?;
        let d = weights.d();
        let denom = transition_denominator(data);
        let mut pair_totals = DMatrix::zeros(d, d);
        for w in &weights.per_seq {
            for p in &w.pairs {
                pair_totals += p;
            }
        }
        pair_totals /= denom;
        Ok(Self { data, weights, pair_totals, denom, d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn value(&self, gating: &Gating) -> Result<f64> {
        Ok(self.value_and_grad_impl(gating, false)?.0)
    }

    /// Value and gradient in the tied parameter structure.
    pub fn value_and_grad(&self, gating: &Gating) -> Result<(f64, Gating)> {
        let (v, g) = self.value_and_grad_impl(gating, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn value_and_grad_impl(&self, gating: &Gating, want_grad: bool) -> Result<(f64, Option<Gating>)> {
        let d = self.d;
        match gating {
            Gating::Static(logits) => {
                if logits.len() != d {
                    return Err(Error::InvalidArgument("static gating row length != d".into()));
                }
                let l = lse_slice(logits.as_slice());
                let col_sums = self.pair_totals.row_sum(); // 1 × d? see below
                // pair_totals columns are the next-mode marginals.
                let mut col = DVector::zeros(d);
                for j in 0..d {
                    col[j] = self.pair_totals.column(j).sum();
                }
                let total_w: f64 = self.pair_totals.sum();
                let value = total_w * l - col.dot(logits);
                let _ = col_sums;
                let grad = if want_grad {
                    let mut sm = logits.clone();
                    math::softmax_in_place(sm.as_mut_slice());
                    Some(Gating::Static(total_w * sm - col))
                } else {
                    None
                };
                Ok((value, grad))
            }
            Gating::ModeDependent(rows) => {
                if rows.nrows() != d || rows.ncols() != d {
                    return Err(Error::InvalidArgument("mode-dependent gating must be d×d".into()));
                }
                let mut value = 0.0;
                let mut grad = if want_grad { Some(DMatrix::zeros(d, d)) } else { None };
                for i in 0..d {
                    let logits = rows.row(i).transpose();
                    let l = lse_slice(logits.as_slice());
                    let w_i: f64 = self.pair_totals.row(i).sum();
                    value += w_i * l;
                    for j in 0..d {
                        value -= self.pair_totals[(i, j)] * logits[j];
                    }
                    if let Some(g) = grad.as_mut() {
                        let mut sm = logits.clone();
                        math::softmax_in_place(sm.as_mut_slice());
                        for j in 0..d {
                            g[(i, j)] = w_i * sm[j] - self.pair_totals[(i, j)];
                        }
                    }
                }
                Ok((value, grad.map(Gating::ModeDependent)))
            }
            Gating::StateDependent(theta) => {
                let n_z = self.data[0].layout().n_z();
                if theta.nrows() != n_z || theta.ncols() != d {
                    return Err(Error::InvalidArgument("state-dependent gating shape".into()));
                }
                let mut value = 0.0;
                let mut grad = if want_grad { Some(DMatrix::zeros(n_z, d)) } else { None };
                for (seq, w) in self.data.iter().zip(&self.weights.per_seq) {
                    for (t, pairs) in w.pairs.iter().enumerate() {
                        let z = &seq.z[t + 1].values;
                        let logits = theta.transpose() * z;
                        let l = lse_slice(logits.as_slice());
                        // Total mass per slice is 1; next-mode marginal drives
                        // the linear term.
                        value += l / self.denom;
                        for j in 0..d {
                            let m_j: f64 = pairs.column(j).sum();
                            value -= m_j * logits[j] / self.denom;
                        }
                        if let Some(g) = grad.as_mut() {
                            let mut sm = logits.clone();
                            math::softmax_in_place(sm.as_mut_slice());
                            for j in 0..d {
                                let m_j: f64 = pairs.column(j).sum();
                                let coef = (sm[j] - m_j) / self.denom;
                                g.column_mut(j).axpy(coef, z, 1.0);
                            }
                        }
                    }
                }
                Ok((value, grad.map(Gating::StateDependent)))
            }
            Gating::General(thetas) => {
                let n_z = self.data[0].layout().n_z();
                if thetas.len() != d
                    || thetas.iter().any(|m| m.nrows() != n_z || m.ncols() != d)
                {
                    return Err(Error::InvalidArgument("general gating shape".into()));
                }
                let mut value = 0.0;
                let mut grad = if want_grad {
                    Some(vec![DMatrix::zeros(n_z, d); d])
                } else {
                    None
                };
                for (seq, w) in self.data.iter().zip(&self.weights.per_seq) {
                    for (t, pairs) in w.pairs.iter().enumerate() {
                        let z = &seq.z[t + 1].values;
                        for i in 0..d {
                            let w_i: f64 = pairs.row(i).sum();
                            if w_i == 0.0 && !want_grad {
                                continue;
                            }
                            let logits = thetas[i].transpose() * z;
                            let l = lse_slice(logits.as_slice());
                            value += w_i * l / self.denom;
                            for j in 0..d {
                                value -= pairs[(i, j)] * logits[j] / self.denom;
                            }
                            if let Some(g) = grad.as_mut() {
                                let mut sm = logits.clone();
                                math::softmax_in_place(sm.as_mut_slice());
                                for j in 0..d {
                                    let coef = (w_i * sm[j] - pairs[(i, j)]) / self.denom;
                                    g[i].column_mut(j).axpy(coef, z, 1.0);
                                }
                            }
                        }
                    }
                }
                Ok((value, grad.map(Gating::General)))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Expert surrogate
// ---------------------------------------------------------------------------

/// Per-mode weighted second moments; everything the expert surrogate needs.
#[derive(Debug, Clone)]
pub struct ModeStats {
    /// `Σ w ū ūᵀ`.
    pub suu: DMatrix<f64>,
    /// `Σ w ū z̃ᵀ` with `z̃ = [z; 1]`.
    pub suz: DMatrix<f64>,
    /// `Σ w z̃ z̃ᵀ`.
    pub szz: DMatrix<f64>,
    /// `Σ w`.
    pub w_total: f64,
}

/// The expert block of the surrogate, collapsed to sufficient statistics.
#[derive(Debug, Clone)]
pub struct ExpertSurrogate {
    pub stats: Vec<ModeStats>,
    pub denom: f64,
    pub n_u: usize,
    pub n_z: usize,
}

impl ExpertSurrogate {
    pub fn new(data: &[SupervisedSequence], weights: &SurrogateWeights) -> Result<Self> {
        check_weights(data, weights)?;
        let d = weights.d();
        let n_u = data[0].u[0].len();
        let n_z = data[0].layout().n_z();
        let denom = transition_denominator(data);
        let mut stats = vec![
            ModeStats {
                suu: DMatrix::zeros(n_u, n_u),
                suz: DMatrix::zeros(n_u, n_z + 1),
                szz: DMatrix::zeros(n_z + 1, n_z + 1),
                w_total: 0.0,
            };
            d
        ];
        let mut ztil = DVector::zeros(n_z + 1);
        for (seq, w) in data.iter().zip(&weights.per_seq) {
            for t in 0..seq.len() {
                ztil.view_mut((0, 0), (n_z, 1)).copy_from(&seq.z[t].values);
                ztil[n_z] = 1.0;
                let u = &seq.u[t];
                for i in 0..d {
                    let wt = w.singles[(t, i)] / denom;
                    if wt == 0.0 {
                        continue;
                    }
                    let s = &mut stats[i];
                    s.w_total += wt;
                    s.suu.ger(wt, u, u, 1.0);
                    s.suz.ger(wt, u, &ztil, 1.0);
                    s.szz.ger(wt, &ztil, &ztil, 1.0);
                }
            }
        }
        Ok(Self { stats, denom, n_u, n_z })
    }

    /// Uniform-weight statistics over all pairs, for single-expert ridge fits.
    pub fn uniform(data: &[SupervisedSequence]) -> Result<Self> {
        let n_u = data[0].u[0].len();
        let n_z = data[0].layout().n_z();
        let denom = transition_denominator(data);
        let mut stat = ModeStats {
            suu: DMatrix::zeros(n_u, n_u),
            suz: DMatrix::zeros(n_u, n_z + 1),
            szz: DMatrix::zeros(n_z + 1, n_z + 1),
            w_total: 0.0,
        };
        let mut ztil = DVector::zeros(n_z + 1);
        for seq in data {
            for t in 0..seq.len() {
                ztil.view_mut((0, 0), (n_z, 1)).copy_from(&seq.z[t].values);
                ztil[n_z] = 1.0;
                let u = &seq.u[t];
                let wt = 1.0 / denom;
                stat.w_total += wt;
                stat.suu.ger(wt, u, u, 1.0);
                stat.suz.ger(wt, u, &ztil, 1.0);
                stat.szz.ger(wt, &ztil, &ztil, 1.0);
            }
        }
        Ok(Self { stats: vec![stat], denom, n_u, n_z })
    }

    fn check_nat(&self, nat: &NaturalParams) -> Result<()> {
        if nat.d() != self.stats.len() {
            return Err(Error::InvalidArgument(format!(
                "natural params have {} modes, stats have {}",
                nat.d(),
                self.stats.len()
            )));
        }
        for m in &nat.modes {
            if m.n_u() != self.n_u || m.n_z() != self.n_z {
                return Err(Error::InvalidArgument(
                    "natural-parameter shapes do not match the data".into(),
                ));
            }
        }
        Ok(())
    }

    /// Surrogate value `Σ_i ½[tr(Λ S_uu) − 2 tr(C S_uzᵀ) + tr(Cᵀ Λ⁻¹ C S_zz)
    /// − W ln det Λ]` (the iterate-dependent constant is dropped).
    pub fn value(&self, nat: &NaturalParams) -> Result<f64> {
        self.check_nat(nat)?;
        let mut total = 0.0;
        for (mode, s) in nat.modes.iter().zip(&self.stats) {
            let lam = &mode.precision;
            let c = &mode.coeff;
            let lam_inv_c = mode.precision_chol().solve(c);
            let logdet = 2.0
                * mode
                    .precision_chol()
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|x| x.ln())
                    .sum::<f64>();
            total += 0.5
                * ((lam * &s.suu).trace() - 2.0 * (c * s.suz.transpose()).trace()
                    + (lam_inv_c.transpose() * c * &s.szz).trace()
                    - s.w_total * logdet);
        }
        Ok(total)
    }

    /// Gradients with respect to `C_i` and (symmetrized) `Λ_i`.
    pub fn value_and_grad(
        &self,
        nat: &NaturalParams,
    ) -> Result<(f64, Vec<(DMatrix<f64>, DMatrix<f64>)>)> {
        self.check_nat(nat)?;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(nat.d());
        for (mode, s) in nat.modes.iter().zip(&self.stats) {
            let lam = &mode.precision;
            let c = &mode.coeff;
            let lam_inv_c = mode.precision_chol().solve(c);
            let logdet = 2.0
                * mode
                    .precision_chol()
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|x| x.ln())
                    .sum::<f64>();
            total += 0.5
                * ((lam * &s.suu).trace() - 2.0 * (c * s.suz.transpose()).trace()
                    + (lam_inv_c.transpose() * c * &s.szz).trace()
                    - s.w_total * logdet);
            let lam_inv = mode.precision_chol().inverse();
            let grad_c = &lam_inv_c * &s.szz - &s.suz;
            let mid = &lam_inv_c * &s.szz * lam_inv_c.transpose();
            let grad_lam = 0.5 * (&s.suu - mid - s.w_total * &lam_inv);
            let grad_lam = 0.5 * (&grad_lam + grad_lam.transpose());
            grads.push((grad_c, grad_lam));
        }
        Ok((total, grads))
    }
}

// ---------------------------------------------------------------------------
// Regularizers
// ---------------------------------------------------------------------------

/// Regularization strengths; all strictly positive for the surrogate problem
/// to be strongly convex.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { gamma1: 5e-6, gamma2: 5e-6, gamma3: 5e-6 }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 || self.gamma3 < 0.0 {
            return Err(Error::InvalidArgument("regularization strengths must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// `r1`: squared Frobenius penalty on the stored (tied) gating parameters.
pub fn regularizer_gating(gating: &Gating, cfg: &RegConfig) -> f64 {
    let sq = match gating {
        Gating::Static(v) => v.norm_squared(),
        Gating::ModeDependent(m) => m.norm_squared(),
        Gating::StateDependent(m) => m.norm_squared(),
        Gating::General(ms) => ms.iter().map(|m| m.norm_squared()).sum(),
    };
    0.5 * cfg.gamma1 * sq
}

/// Gradient of `r1` in the tied structure.
pub fn regularizer_gating_grad(gating: &Gating, cfg: &RegConfig) -> Gating {
    match gating {
        Gating::Static(v) => Gating::Static(cfg.gamma1 * v),
        Gating::ModeDependent(m) => Gating::ModeDependent(cfg.gamma1 * m),
        Gating::StateDependent(m) => Gating::StateDependent(cfg.gamma1 * m),
        Gating::General(ms) => Gating::General(ms.iter().map(|m| cfg.gamma1 * m).collect()),
    }
}

/// `r2`: `½ Σ_i γ2(tr Λ_i − ln det Λ_i) + γ3 tr(C_iᵀ Λ_i⁻¹ C_i)`.
pub fn regularizer_expert(nat: &NaturalParams, cfg: &RegConfig) -> Result<f64> {
    let mut total = 0.0;
    for mode in &nat.modes {
        let logdet = 2.0
            * mode
                .precision_chol()
                .l_dirty()
                .diagonal()
                .iter()
                .map(|x| x.ln())
                .sum::<f64>();
        let lam_inv_c = mode.precision_chol().solve(&mode.coeff);
        total += 0.5
            * (cfg.gamma2 * (mode.precision.trace() - logdet)
                + cfg.gamma3 * (mode.coeff.transpose() * &lam_inv_c).trace());
    }
    Ok(total)
}

/// Gradients of `r2` per mode, `(∂/∂C, ∂/∂Λ)`.
pub fn regularizer_expert_grad(
    nat: &NaturalParams,
    cfg: &RegConfig,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let mut out = Vec::with_capacity(nat.d());
    for mode in &nat.modes {
        let lam_inv = mode.precision_chol().inverse();
        let lam_inv_c = mode.precision_chol().solve(&mode.coeff);
        let grad_c = cfg.gamma3 * &lam_inv_c;
        let eye = DMatrix::identity(mode.n_u(), mode.n_u());
        let grad_lam = 0.5 * cfg.gamma2 * (&eye - &lam_inv)
            - 0.5 * cfg.gamma3 * &lam_inv_c * lam_inv_c.transpose();
        let grad_lam = 0.5 * (&grad_lam + grad_lam.transpose());
        out.push((grad_c, grad_lam));
    }
    Ok(out)
}

/// Combined regularizer `r = r1 + r2` on the full parameter set.
pub fn regularizer(gating: &Gating, nat: &NaturalParams, cfg: &RegConfig) -> Result<f64> {
    Ok(regularizer_gating(gating, cfg) + regularizer_expert(nat, cfg)?)
}

/// Normalized regularized objective at the given policy.
pub fn regularized_objective(
    data: &[SupervisedSequence],
    params: &PolicyParams,
    cfg: &RegConfig,
    prior0: Option<&DVector<f64>>,
) -> Result<f64> {
    let nll = crate::inference::neg_loglik_batch(data, params, prior0)?;
    let nat = params.to_natural()?;
    Ok(nll + regularizer(&params.gating, &nat, cfg)?)
}

/// Dimension of the tied gating parameter vector.
pub fn gating_dim(kind: SwitchingKind, d: usize, n_z: usize) -> usize {
    match kind {
        SwitchingKind::Static => d,
        SwitchingKind::ModeDependent => d * d,
        SwitchingKind::StateDependent => n_z * d,
        SwitchingKind::General => d * n_z * d,
    }
}

/// Flatten the tied gating parameters (column-major within each matrix).
pub fn gating_flatten(gating: &Gating) -> DVector<f64> {
    match gating {
        Gating::Static(v) => v.clone(),
        Gating::ModeDependent(m) => {
            // Row-major so each previous-mode row is a contiguous block.
            DVector::from_iterator(
                m.nrows() * m.ncols(),
                (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]),
            )
        }
        Gating::StateDependent(m) => DVector::from_column_slice(m.as_slice()),
        Gating::General(ms) => {
            let per = ms[0].nrows() * ms[0].ncols();
            let mut out = DVector::zeros(per * ms.len());
            for (i, m) in ms.iter().enumerate() {
                out.view_mut((i * per, 0), (per, 1))
                    .copy_from(&DVector::from_column_slice(m.as_slice()));
            }
            out
        }
    }
}

/// Inverse of [`gating_flatten`].
pub fn gating_unflatten(kind: SwitchingKind, d: usize, n_z: usize, x: &DVector<f64>) -> Gating {
    assert_eq!(x.len(), gating_dim(kind, d, n_z));
    match kind {
        SwitchingKind::Static => Gating::Static(x.clone()),
        SwitchingKind::ModeDependent => {
            let mut m = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] = x[i * d + j];
                }
            }
            Gating::ModeDependent(m)
        }
        SwitchingKind::StateDependent => {
            Gating::StateDependent(DMatrix::from_column_slice(n_z, d, x.as_slice()))
        }
        SwitchingKind::General => {
            let per = n_z * d;
            Gating::General(
                (0..d)
                    .map(|i| {
                        DMatrix::from_column_slice(n_z, d, &x.as_slice()[i * per..(i + 1) * per])
                    })
                    .collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::test_support::*;
    use crate::model::NaturalMode;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(
        rng: &mut ChaCha8Rng,
        kind: SwitchingKind,
        d: usize,
    ) -> (Vec<SupervisedSequence>, SurrogateWeights, PolicyParams) {
        let layout = small_layout(2, 2);
        let data = vec![
            random_sequence(rng, 12, 2, layout),
            random_sequence(rng, 9, 2, layout),
        ];
        let params = random_policy(rng, kind, d, 2, layout.n_z());
        let (weights, _) = SurrogateWeights::compute(&data, &params, None).unwrap();
        (data, weights, params)
    }

    fn random_nat(rng: &mut ChaCha8Rng, d: usize, n_u: usize, n_z: usize) -> NaturalParams {
        NaturalParams {
            modes: (0..d)
                .map(|_| {
                    NaturalMode::new(
                        DMatrix::from_fn(n_u, n_z + 1, |_, _| rng.gen_range(-1.0..1.0)),
                        random_spd(rng, n_u, 1.0),
                    )
                    .unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn gating_zero_theta_gives_ln_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for (kind, d) in [
            (SwitchingKind::General, 3usize),
            (SwitchingKind::Static, 3),
            (SwitchingKind::ModeDependent, 2),
            (SwitchingKind::StateDependent, 4),
        ] {
            let (data, weights, _) = setup(&mut rng, kind, d);
            let surr = GatingSurrogate::new(&data, &weights).unwrap();
            let zero = Gating::zeros(kind, d, data[0].layout().n_z());
            assert_abs_diff_eq!(surr.value(&zero).unwrap(), (d as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gating_single_mode_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (data, weights, params) = setup(&mut rng, SwitchingKind::Static, 1);
        let surr = GatingSurrogate::new(&data, &weights).unwrap();
        assert_abs_diff_eq!(surr.value(&params.gating).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gating_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for kind in [
            SwitchingKind::General,
            SwitchingKind::Static,
            SwitchingKind::ModeDependent,
            SwitchingKind::StateDependent,
        ] {
            let d = 3;
            let (data, weights, params) = setup(&mut rng, kind, d);
            let n_z = data[0].layout().n_z();
            let surr = GatingSurrogate::new(&data, &weights).unwrap();
            let x0 = gating_flatten(&params.gating);
            let (_, grad) = surr.value_and_grad(&params.gating).unwrap();
            let g = gating_flatten(&grad);
            let h = 1e-6;
            for k in 0..x0.len() {
                let mut xp = x0.clone();
                xp[k] += h;
                let mut xm = x0.clone();
                xm[k] -= h;
                let vp = surr.value(&gating_unflatten(kind, d, n_z, &xp)).unwrap();
                let vm = surr.value(&gating_unflatten(kind, d, n_z, &xm)).unwrap();
                let fd = (vp - vm) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0),
                    "{kind:?} slot {k}: fd {fd} vs analytic {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn expert_zero_residual_identity_precision_is_zero() {
        // Single mode, Λ=I, C=[K b], residuals identically zero.
        let layout = small_layout(1, 1);
        let n_z = layout.n_z();
        let gain = DMatrix::from_row_slice(1, 2, &[0.4, -0.3]);
        let offset = DVector::from_row_slice(&[0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let z: Vec<_> = (0..8)
            .map(|_| {
                crate::model::HistoryVector::new(
                    DVector::from_fn(n_z, |_, _| rng.gen_range(-1.0..1.0)),
                    layout,
                )
                .unwrap()
            })
            .collect();
        let u: Vec<_> = z.iter().map(|h| &gain * &h.values + &offset).collect();
        let seq = SupervisedSequence::new(z, u, 1).unwrap();
        let params = PolicyParams {
            experts: vec![crate::model::Expert {
                gain: gain.clone(),
                offset: offset.clone(),
                covariance: DMatrix::identity(1, 1),
            }],
            gating: Gating::Static(DVector::zeros(1)),
        };
        let data = vec![seq];
        let (weights, _) = SurrogateWeights::compute(&data, &params, None).unwrap();
        let surr = ExpertSurrogate::new(&data, &weights).unwrap();
        let nat = params.to_natural().unwrap();
        assert_abs_diff_eq!(surr.value(&nat).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn expert_value_invariant_under_matched_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let (data, weights, params) = setup(&mut rng, SwitchingKind::General, 3);
        let surr = ExpertSurrogate::new(&data, &weights).unwrap();
        let nat = params.to_natural().unwrap();
        let v = surr.value(&nat).unwrap();

        // Permute the weights and the natural params together.
        let perm = [2usize, 0, 1];
        let permuted_weights = SurrogateWeights {
            per_seq: weights
                .per_seq
                .iter()
                .map(|p| {
                    let mut singles = p.singles.clone();
                    for t in 0..p.singles.nrows() {
                        for (i, &pi) in perm.iter().enumerate() {
                            singles[(t, pi)] = p.singles[(t, i)];
                        }
                    }
                    let pairs = p
                        .pairs
                        .iter()
                        .map(|m| {
                            let mut out = m.clone();
                            for (i, &pi) in perm.iter().enumerate() {
                                for (j, &pj) in perm.iter().enumerate() {
                                    out[(pi, pj)] = m[(i, j)];
                                }
                            }
                            out
                        })
                        .collect();
                    PosteriorMarginals { singles, pairs }
                })
                .collect(),
        };
        let mut modes: Vec<NaturalMode> = nat.modes.clone();
        for (i, &pi) in perm.iter().enumerate() {
            modes[pi] = nat.modes[i].clone();
        }
        let permuted_nat = NaturalParams { modes };
        let surr_p = ExpertSurrogate::new(&data, &permuted_weights).unwrap();
        assert_abs_diff_eq!(surr_p.value(&permuted_nat).unwrap(), v, epsilon = 1e-10);
    }

    #[test]
    fn expert_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let (data, weights, _) = setup(&mut rng, SwitchingKind::Static, 2);
        let surr = ExpertSurrogate::new(&data, &weights).unwrap();
        let nat = random_nat(&mut rng, 2, 2, data[0].layout().n_z());
        let (_, grads) = surr.value_and_grad(&nat).unwrap();
        let h = 1e-6;

        let eval = |nat: &NaturalParams| surr.value(nat).unwrap();
        for mode_idx in 0..2 {
            // C block: entrywise.
            for r in 0..2 {
                for c in 0..nat.modes[0].coeff.ncols() {
                    let mut np = nat.clone();
                    let mut nm = nat.clone();
                    let mut cp = np.modes[mode_idx].coeff.clone();
                    cp[(r, c)] += h;
                    np.modes[mode_idx] =
                        NaturalMode::new(cp, np.modes[mode_idx].precision.clone()).unwrap();
                    let mut cm = nm.modes[mode_idx].coeff.clone();
                    cm[(r, c)] -= h;
                    nm.modes[mode_idx] =
                        NaturalMode::new(cm, nm.modes[mode_idx].precision.clone()).unwrap();
                    let fd = (eval(&np) - eval(&nm)) / (2.0 * h);
                    let an = grads[mode_idx].0[(r, c)];
                    assert!(
                        (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                        "C[{mode_idx}][{r},{c}]: fd {fd} vs {an}"
                    );
                }
            }
            // Λ block: symmetric perturbations.
            for r in 0..2 {
                for c in r..2 {
                    let mut dp = DMatrix::zeros(2, 2);
                    dp[(r, c)] = 1.0;
                    dp[(c, r)] = 1.0;
                    let mut np = nat.clone();
                    np.modes[mode_idx] = NaturalMode::new(
                        np.modes[mode_idx].coeff.clone(),
                        &np.modes[mode_idx].precision + h * &dp,
                    )
                    .unwrap();
                    let mut nm = nat.clone();
                    nm.modes[mode_idx] = NaturalMode::new(
                        nm.modes[mode_idx].coeff.clone(),
                        &nm.modes[mode_idx].precision - h * &dp,
                    )
                    .unwrap();
                    let fd = (eval(&np) - eval(&nm)) / (2.0 * h);
                    let an = (grads[mode_idx].1).dot(&dp);
                    assert!(
                        (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                        "Λ[{mode_idx}][{r},{c}]: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn regularizer_direct_substitution() {
        // Θ=0, C=0, Λ=I, n_u=2, d=3, γ2=5e-6 → r2 = 1.5e-5.
        let cfg = RegConfig { gamma1: 5e-6, gamma2: 5e-6, gamma3: 5e-6 };
        let nat = NaturalParams {
            modes: (0..3)
                .map(|_| NaturalMode::new(DMatrix::zeros(2, 5), DMatrix::identity(2, 2)).unwrap())
                .collect(),
        };
        let gating = Gating::zeros(SwitchingKind::General, 3, 4);
        let r = regularizer(&gating, &nat, &cfg).unwrap();
        assert_abs_diff_eq!(r, 1.5e-5, epsilon = 1e-18);
    }

    #[test]
    fn regularizer_zero_strengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let nat = random_nat(&mut rng, 2, 2, 3);
        let gating = Gating::Static(DVector::from_row_slice(&[1.0, -2.0]));
        let cfg = RegConfig { gamma1: 0.0, gamma2: 0.0, gamma3: 0.0 };
        assert_abs_diff_eq!(regularizer(&gating, &nat, &cfg).unwrap(), 0.0, epsilon = 0.0);
    }

    #[test]
    fn regularizer_matches_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        for _ in 0..20 {
            let cfg = RegConfig {
                gamma1: rng.gen_range(0.0..1.0),
                gamma2: rng.gen_range(0.0..1.0),
                gamma3: rng.gen_range(0.0..1.0),
            };
            let d = 2;
            let nat = random_nat(&mut rng, d, 2, 3);
            let theta = DMatrix::from_fn(3, d, |_, _| rng.gen_range(-1.0..1.0));
            let gating = Gating::StateDependent(theta.clone());
            let got = regularizer(&gating, &nat, &cfg).unwrap();

            let mut expect = 0.5 * cfg.gamma1 * theta.norm_squared();
            for m in &nat.modes {
                let lam_inv = m.precision.clone().try_inverse().unwrap();
                expect += 0.5
                    * (cfg.gamma2 * (m.precision.trace() - m.precision.determinant().ln())
                        + cfg.gamma3 * (m.coeff.transpose() * &lam_inv * &m.coeff).trace());
            }
            assert_abs_diff_eq!(got, expect, epsilon = 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn regularizer_expert_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let cfg = RegConfig { gamma1: 0.3, gamma2: 0.7, gamma3: 0.5 };
        let nat = random_nat(&mut rng, 1, 2, 3);
        let grads = regularizer_expert_grad(&nat, &cfg).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..4 {
                let mut cp = nat.modes[0].coeff.clone();
                cp[(r, c)] += h;
                let mut cm = nat.modes[0].coeff.clone();
                cm[(r, c)] -= h;
                let vp = regularizer_expert(
                    &NaturalParams {
                        modes: vec![NaturalMode::new(cp, nat.modes[0].precision.clone()).unwrap()],
                    },
                    &cfg,
                )
                .unwrap();
                let vm = regularizer_expert(
                    &NaturalParams {
                        modes: vec![NaturalMode::new(cm, nat.modes[0].precision.clone()).unwrap()],
                    },
                    &cfg,
                )
                .unwrap();
                let fd = (vp - vm) / (2.0 * h);
                let an = grads[0].0[(r, c)];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0));
            }
        }
        for r in 0..2 {
            for c in r..2 {
                let mut dp = DMatrix::zeros(2, 2);
                dp[(r, c)] = 1.0;
                dp[(c, r)] = 1.0;
                let vp = regularizer_expert(
                    &NaturalParams {
                        modes: vec![NaturalMode::new(
                            nat.modes[0].coeff.clone(),
                            &nat.modes[0].precision + h * &dp,
                        )
                        .unwrap()],
                    },
                    &cfg,
                )
                .unwrap();
                let vm = regularizer_expert(
                    &NaturalParams {
                        modes: vec![NaturalMode::new(
                            nat.modes[0].coeff.clone(),
                            &nat.modes[0].precision - h * &dp,
                        )
                        .unwrap()],
                    },
                    &cfg,
                )
                .unwrap();
                let fd = (vp - vm) / (2.0 * h);
                let an = grads[0].1.dot(&dp);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0));
            }
        }
    }

    #[test]
    fn surrogates_are_midpoint_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let (data, weights, _) = setup(&mut rng, SwitchingKind::General, 2);
        let n_z = data[0].layout().n_z();
        let gate_surr = GatingSurrogate::new(&data, &weights).unwrap();
        let exp_surr = ExpertSurrogate::new(&data, &weights).unwrap();
        for _ in 0..1000 {
            // Gating midpoint convexity.
            let a = gating_flatten(&random_policy(&mut rng, SwitchingKind::General, 2, 2, n_z).gating);
            let b = gating_flatten(&random_policy(&mut rng, SwitchingKind::General, 2, 2, n_z).gating);
            let mid = 0.5 * (&a + &b);
            let f = |x: &DVector<f64>| {
                gate_surr
                    .value(&gating_unflatten(SwitchingKind::General, 2, n_z, x))
                    .unwrap()
            };
            assert!(f(&mid) <= 0.5 * f(&a) + 0.5 * f(&b) + 1e-10);

            // Expert midpoint convexity in (C, Λ) jointly.
            let na = random_nat(&mut rng, 2, 2, n_z);
            let nb = random_nat(&mut rng, 2, 2, n_z);
            let nmid = NaturalParams {
                modes: na
                    .modes
                    .iter()
                    .zip(&nb.modes)
                    .map(|(x, y)| {
                        NaturalMode::new(
                            0.5 * (&x.coeff + &y.coeff),
                            0.5 * (&x.precision + &y.precision),
                        )
                        .unwrap()
                    })
                    .collect(),
            };
            let va = exp_surr.value(&na).unwrap();
            let vb = exp_surr.value(&nb).unwrap();
            let vm = exp_surr.value(&nmid).unwrap();
            assert!(vm <= 0.5 * va + 0.5 * vb + 1e-10);
        }
    }
}
