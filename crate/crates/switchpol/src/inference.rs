//! Exact posterior inference for the switching policy: log-space
//! forward-backward over mode sequences conditioned on the observed
//! `(z_t, ū_t)` stream, plus a literal enumeration oracle for small instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{self, lse_slice};
use crate::model::{HistoryLayout, HistoryVector, PolicyParams};

/// Aligned `(z_t, ū_t)` pairs for `t = τ, …`, after the warm-up prefix has
/// been consumed to build the first history vector.
#[derive(Debug, Clone)]
pub struct SupervisedSequence {
    pub z: Vec<HistoryVector>,
    pub u: Vec<DVector<f64>>,
    /// Warm-up length: number of leading raw samples not represented here.
    pub tau: usize,
}

impl SupervisedSequence {
    pub fn new(z: Vec<HistoryVector>, u: Vec<DVector<f64>>, tau: usize) -> Result<Self> {
        if z.len() != u.len() {
            return Err(Error::InvalidArgument(format!(
                "history/input length mismatch: {} vs {}",
                z.len(),
                u.len()
            )));
        }
        if z.len() < 2 {
            return Err(Error::InvalidArgument(
                "supervised sequence needs at least 2 aligned pairs".into(),
            ));
        }
        let layout = z[0].layout;
        if tau < layout.t_u.max(layout.t_x) {
            return Err(Error::InvalidArgument(format!(
                "warm-up {tau} too short for lags (t_u={}, t_x={})",
                layout.t_u, layout.t_x
            )));
        }
        if z.iter().any(|h| h.layout != layout) {
            return Err(Error::InvalidArgument("inconsistent history layouts".into()));
        }
        let n_u = u[0].len();
        if u.iter().any(|v| v.len() != n_u) {
            return Err(Error::InvalidArgument("inconsistent input dimensions".into()));
        }
        Ok(Self { z, u, tau })
    }

    /// Number of aligned pairs.
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn layout(&self) -> HistoryLayout {
        self.z[0].layout
    }

    /// Normalizer used by the surrogate and the normalized likelihood:
    /// the number of mode transitions.
    pub fn transition_count(&self) -> usize {
        self.len() - 1
    }

    fn check_params(&self, params: &PolicyParams) -> Result<()> {
        params.validate()?;
        if params.n_u() != self.u[0].len() {
            return Err(Error::InvalidArgument(format!(
                "policy expects n_u={}, sequence has {}",
                params.n_u(),
                self.u[0].len()
            )));
        }
        if params.n_z() != self.layout().n_z() {
            return Err(Error::InvalidArgument(format!(
                "policy expects n_z={}, sequence has {}",
                params.n_z(),
                self.layout().n_z()
            )));
        }
        Ok(())
    }
}

/// Smoothed single and pairwise mode probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMarginals {
    /// `singles[(t, i)] = p(ξ_t = i | data)`, one row per aligned pair.
    pub singles: DMatrix<f64>,
    /// `pairs[t][(i, j)] = p(ξ_t = i, ξ_{t+1} = j | data)`.
    pub pairs: Vec<DMatrix<f64>>,
}

impl PosteriorMarginals {
    pub fn len(&self) -> usize {
        self.singles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.singles.nrows() == 0
    }

    pub fn d(&self) -> usize {
        self.singles.ncols()
    }

    /// Verify normalization and marginal consistency at the given tolerances.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.len();
        let d = self.d();
        for t in 0..n {
            let s: f64 = self.singles.row(t).iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!(
                    "singles row {t} sums to {s}, not 1"
                )));
            }
        }
        for (t, p) in self.pairs.iter().enumerate() {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!("pairs slice {t} sums to {s}, not 1")));
            }
            for i in 0..d {
                let row_sum: f64 = p.row(i).iter().sum();
                if (row_sum - self.singles[(t, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "pair slice {t}: Σ_j q[{i},j] = {row_sum} != q_t^{i}"
                    )));
                }
            }
            for j in 0..d {
                let col_sum: f64 = p.column(j).iter().sum();
                if (col_sum - self.singles[(t + 1, j)]).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "pair slice {t}: Σ_i q[i,{j}] = {col_sum} != q_(t+1)^{j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn uniform_prior(d: usize) -> DVector<f64> {
    DVector::from_element(d, 1.0 / d as f64)
}

/// Validate a caller-supplied initial mode distribution, or build the uniform
/// default.
pub fn initial_prior(prior0: Option<&DVector<f64>>, d: usize) -> Result<DVector<f64>> {
    match prior0 {
        None => Ok(uniform_prior(d)),
        Some(p) => {
            if p.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "prior has length {}, expected {d}",
                    p.len()
                )));
            }
            if p.iter().any(|&x| x < 0.0) || (p.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("prior is not a probability vector".into()));
            }
            Ok(p.clone())
        }
    }
}

/// Per-step log quantities shared by the passes.
struct LogModel {
    /// `emit[(t, i)] = ln N(ū_t; K_i z_t + b_i, Σ_i)`.
    emit: DMatrix<f64>,
    /// `trans[t][(i, j)] = ln p(ξ_t = j | z_t, ξ_{t−1} = i)` for `t ≥ 1`;
    /// slot 0 is unused.
    trans: Vec<DMatrix<f64>>,
    log_prior: DVector<f64>,
}

fn build_log_model(
    seq: &SupervisedSequence,
    params: &PolicyParams,
    prior0: &DVector<f64>,
) -> Result<LogModel> {
    let n = seq.len();
    let d = params.d();
    let nat_chols = params
        .experts
        .iter()
        .enumerate()
        .map(|(i, ex)| math::cholesky(&ex.covariance, &format!("covariance of mode {i}")))
        .collect::<Result<Vec<_>>>()?;

    let mut emit = DMatrix::zeros(n, d);
    for t in 0..n {
        for i in 0..d {
            let mean = params.experts[i].mean(&seq.z[t].values);
            emit[(t, i)] = math::gauss_logpdf_chol(&seq.u[t], &mean, &nat_chols[i]);
        }
    }

    let mut trans = Vec::with_capacity(n);
    trans.push(DMatrix::zeros(0, 0));
    for t in 1..n {
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            let logits = params.gate_logits(&seq.z[t].values, i)?;
            let l = lse_slice(logits.as_slice());
            for j in 0..d {
                m[(i, j)] = logits[j] - l;
            }
        }
        trans.push(m);
    }

    let log_prior = prior0.map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
    Ok(LogModel { emit, trans, log_prior })
}

/// Exact smoothed marginals and log-likelihood by the scaled two-pass
/// recursion in log space.
///
/// The θ-independent dynamics factor `p(x_{t+1} | x_t, ū_t)` is omitted, so
/// absolute values are comparable only within this convention.
pub fn forward_backward(
    seq: &SupervisedSequence,
    params: &PolicyParams,
    prior0: Option<&DVector<f64>>,
) -> Result<(PosteriorMarginals, f64)> {
    seq.check_params(params)?;
    let d = params.d();
    let n = seq.len();
    let prior = initial_prior(prior0, d)?;
    let lm = build_log_model(seq, params, &prior)?;

    // Forward pass with per-step log normalization.
    let mut alpha_hat = DMatrix::zeros(n, d);
    let mut log_norm = vec![0.0f64; n];
    let mut loglik = 0.0;
    let mut work = vec![0.0f64; d];
    for i in 0..d {
        work[i] = lm.log_prior[i] + lm.emit[(0, i)];
    }
    let c0 = lse_slice(&work);
    log_norm[0] = c0;
    loglik += c0;
    for i in 0..d {
        alpha_hat[(0, i)] = work[i] - c0;
    }
    let mut inner = vec![0.0f64; d];
    for t in 1..n {
        for j in 0..d {
            for i in 0..d {
                inner[i] = alpha_hat[(t - 1, i)] + lm.trans[t][(i, j)];
            }
            work[j] = lm.emit[(t, j)] + lse_slice(&inner);
        }
        let c = lse_slice(&work);
        log_norm[t] = c;
        loglik += c;
        for j in 0..d {
            alpha_hat[(t, j)] = work[j] - c;
        }
    }

    // Backward pass scaled by the same normalizers.
    let mut beta_hat = DMatrix::zeros(n, d);
    for t in (0..n - 1).rev() {
        for i in 0..d {
            for j in 0..d {
                inner[j] = lm.trans[t + 1][(i, j)] + lm.emit[(t + 1, j)] + beta_hat[(t + 1, j)];
            }
            beta_hat[(t, i)] = lse_slice(&inner) - log_norm[t + 1];
        }
    }

    // Marginals, renormalized exactly.
    let mut singles = DMatrix::zeros(n, d);
    for t in 0..n {
        for i in 0..d {
            work[i] = (alpha_hat[(t, i)] + beta_hat[(t, i)]).exp();
        }
        let s: f64 = work.iter().sum();
        for i in 0..d {
            singles[(t, i)] = work[i] / s;
        }
    }
    let mut pairs = Vec::with_capacity(n - 1);
    for t in 0..n - 1 {
        let mut p = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                p[(i, j)] = (alpha_hat[(t, i)]
                    + lm.trans[t + 1][(i, j)]
                    + lm.emit[(t + 1, j)]
                    + beta_hat[(t + 1, j)]
                    - log_norm[t + 1])
                    .exp();
            }
        }
        let s: f64 = p.iter().sum();
        p /= s;
        pairs.push(p);
    }

    Ok((PosteriorMarginals { singles, pairs }, loglik))
}

/// Negative log-likelihood normalized by the transition count.
pub fn neg_loglik(
    seq: &SupervisedSequence,
    params: &PolicyParams,
    prior0: Option<&DVector<f64>>,
) -> Result<f64> {
    let (_, ll) = forward_backward(seq, params, prior0)?;
    Ok(-ll / seq.transition_count() as f64)
}

/// Batched normalized negative log-likelihood: per-sequence log-likelihoods
/// summed, divided by the total transition count.
pub fn neg_loglik_batch(
    seqs: &[SupervisedSequence],
    params: &PolicyParams,
    prior0: Option<&DVector<f64>>,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no sequences".into()));
    }
    let mut total = 0.0;
    let mut denom = 0usize;
    for seq in seqs {
        let (_, ll) = forward_backward(seq, params, prior0)?;
        total -= ll;
        denom += seq.transition_count();
    }
    Ok(total / denom as f64)
}

const BRUTE_FORCE_CAP: f64 = 1e7;

/// Literal sum over all `d^N` mode sequences. Small instances only.
pub fn brute_force_loglik(
    seq: &SupervisedSequence,
    params: &PolicyParams,
    prior0: Option<&DVector<f64>>,
) -> Result<f64> {
    let (ll, _) = brute_force_impl(seq, params, prior0, false)?;
    Ok(ll)
}

/// Enumeration oracle returning the smoothed marginals alongside the
/// log-likelihood.
pub fn brute_force_posteriors(
    seq: &SupervisedSequence,
    params: &PolicyParams,
    prior0: Option<&DVector<f64>>,
) -> Result<(f64, PosteriorMarginals)> {
    let (ll, post) = brute_force_impl(seq, params, prior0, true)?;
    Ok((ll, post.expect("posteriors requested")))
}

fn brute_force_impl(
    seq: &SupervisedSequence,
    params: &PolicyParams,
    prior0: Option<&DVector<f64>>,
    with_posteriors: bool,
) -> Result<(f64, Option<PosteriorMarginals>)> {
    seq.check_params(params)?;
    let d = params.d();
    let n = seq.len();
    if (d as f64).powi(n as i32) > BRUTE_FORCE_CAP {
        return Err(Error::Capacity(format!(
            "{d}^{n} mode sequences exceed the enumeration cap of {BRUTE_FORCE_CAP:e}"
        )));
    }
    let prior = initial_prior(prior0, d)?;
    let lm = build_log_model(seq, params, &prior)?;

    let log_joint = |modes: &[usize]| -> f64 {
        let mut lj = lm.log_prior[modes[0]] + lm.emit[(0, modes[0])];
        for t in 1..n {
            lj += lm.trans[t][(modes[t - 1], modes[t])] + lm.emit[(t, modes[t])];
        }
        lj
    };

    // Pass 1: online log-sum-exp over all sequences.
    let mut modes = vec![0usize; n];
    let mut running_max = f64::NEG_INFINITY;
    let mut running_sum = 0.0f64;
    loop {
        let lj = log_joint(&modes);
        if lj > running_max {
            running_sum = running_sum * (running_max - lj).exp() + 1.0;
            running_max = lj;
        } else {
            running_sum += (lj - running_max).exp();
        }
        if !advance(&mut modes, d) {
            break;
        }
    }
    let loglik = running_max + running_sum.ln();

    if !with_posteriors {
        return Ok((loglik, None));
    }

    // Pass 2: accumulate posterior weights exp(log_joint − loglik).
    let mut singles = DMatrix::zeros(n, d);
    let mut pairs = vec![DMatrix::zeros(d, d); n - 1];
    modes.iter_mut().for_each(|m| *m = 0);
    loop {
        let w = (log_joint(&modes) - loglik).exp();
        for t in 0..n {
            singles[(t, modes[t])] += w;
        }
        for t in 0..n - 1 {
            pairs[t][(modes[t], modes[t + 1])] += w;
        }
        if !advance(&mut modes, d) {
            break;
        }
    }
    Ok((loglik, Some(PosteriorMarginals { singles, pairs })))
}

fn advance(modes: &mut [usize], d: usize) -> bool {
    for m in modes.iter_mut() {
        *m += 1;
        if *m < d {
            return true;
        }
        *m = 0;
    }
    false
}

/// Write smoothed single marginals as `t,i,q` rows.
pub fn write_singles_csv(post: &PosteriorMarginals, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("t,i,q\n");
    for t in 0..post.len() {
        for i in 0..post.d() {
            out.push_str(&format!("{t},{i},{}\n", post.singles[(t, i)]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write smoothed pair marginals as `t,i,j,q` rows.
pub fn write_pairs_csv(post: &PosteriorMarginals, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("t,i,j,q\n");
    for (t, p) in post.pairs.iter().enumerate() {
        for i in 0..post.d() {
            for j in 0..post.d() {
                out.push_str(&format!("{t},{i},{j},{}\n", p[(i, j)]));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
