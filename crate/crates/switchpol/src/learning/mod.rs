//! Majorization-minimization training loop: posterior-weighted surrogates,
//! per-block minimization steps, multi-start orchestration, and convergence
//! control.

pub mod expert;
pub mod gating;
pub mod solvers;
pub mod surrogate;

pub use expert::{
    expert_gradient_norm, ridge_expert, solve_expert_step_stable,
    solve_expert_step_unconstrained, BarrierConfig,
};
pub use gating::solve_gating_step;
pub use surrogate::{
    gating_dim, gating_flatten, gating_unflatten, regularized_objective, regularizer,
    regularizer_expert, regularizer_gating, transition_denominator, ExpertSurrogate,
    GatingSurrogate, ModeStats, RegConfig, SurrogateWeights,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SupervisedSequence;
use crate::model::{Expert, Gating, PolicyParams, SwitchingKind};
use crate::stability::{self, StabilityCertificate};

/// Whether the expert step enforces the Lyapunov LMIs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "kebab-case")]
pub enum StabilityOption {
    Off,
    On { epsilon_margin: f64 },
}

impl StabilityOption {
    pub fn is_on(&self) -> bool {
        matches!(self, StabilityOption::On { .. })
    }
}

/// How a start's initial parameters are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Fit one global ridge expert, clone it `d` times with seeded
    /// perturbations scaled to the data ranges.
    RandomPerturbedGlobalFit,
    /// Split the data into `d` contiguous chunks and fit one expert each.
    SegmentSplit,
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub d: usize,
    pub switching_kind: SwitchingKind,
    pub stability: StabilityOption,
    pub max_iters: usize,
    /// Stop when the normalized regularized objective decreases by less than
    /// this relative amount.
    pub rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub reg: RegConfig,
    pub gating_grad_tol: f64,
    pub barrier_mu0: f64,
    pub barrier_shrink: f64,
    pub barrier_mu_final: f64,
    pub barrier_max_inner_iters: usize,
    pub init_strategy: InitStrategy,
    /// Initial mode distribution; uniform when absent.
    pub prior0: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            d: 1,
            switching_kind: SwitchingKind::General,
            stability: StabilityOption::Off,
            max_iters: 200,
            rel_tol: 1e-7,
            n_starts: 10,
            seed: 0,
            reg: RegConfig::default(),
            gating_grad_tol: 1e-8,
            barrier_mu0: 1e-2,
            barrier_shrink: 0.2,
            barrier_mu_final: 1e-8,
            barrier_max_inner_iters: 500,
            init_strategy: InitStrategy::RandomPerturbedGlobalFit,
            prior0: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("mode count must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.gating_grad_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.n_starts == 0 {
            return Err(Error::InvalidArgument("n_starts must be at least 1".into()));
        }
        self.reg.validate()?;
        if let StabilityOption::On { epsilon_margin } = self.stability {
            if !(epsilon_margin > 0.0) {
                return Err(Error::InvalidArgument(
                    "epsilon_margin must be positive when stability is on".into(),
                ));
            }
        }
        self.barrier_config(1e-6).validate()
    }

    fn barrier_config(&self, epsilon_margin: f64) -> BarrierConfig {
        BarrierConfig {
            epsilon_margin,
            mu0: self.barrier_mu0,
            shrink: self.barrier_shrink,
            mu_final: self.barrier_mu_final,
            max_inner_iters: self.barrier_max_inner_iters,
        }
    }

    fn prior_vec(&self) -> Option<DVector<f64>> {
        self.prior0.as_ref().map(|v| DVector::from_row_slice(v))
    }
}

/// One multi-start branch in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSummary {
    pub seed: u64,
    pub iterations: usize,
    pub final_objective: Option<f64>,
    /// Selection score: validation objective when a validation set is given,
    /// training objective otherwise.
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Fit outcome: parameters, the per-iteration objective trace for the winning
/// start, per-start summaries, and the stability certificate when constrained.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: PolicyParams,
    pub objective_trace: Vec<f64>,
    pub per_start: Vec<StartSummary>,
    pub best_start_index: usize,
    pub wall_time_s: f64,
    pub certificate: Option<StabilityCertificate>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "params": self.params.to_json()?,
            "objective_trace": self.objective_trace,
            "per_start": serde_json::to_value(&self.per_start).map_err(|e| Error::Io(e.to_string()))?,
            "best_start_index": self.best_start_index,
            "wall_time_s": self.wall_time_s,
            "certificate": self.certificate.as_ref().map(|c| c.to_json()),
            "warnings": self.warnings,
        }))
    }
}

struct EmRun {
    params: PolicyParams,
    trace: Vec<f64>,
    warnings: Vec<String>,
    certificate: Option<StabilityCertificate>,
    iterations: usize,
}

fn check_data(data: &[SupervisedSequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }
    let layout = data[0].layout();
    let n_u = data[0].u[0].len();
    for seq in data {
        if seq.layout() != layout {
            return Err(Error::InvalidArgument("sequences disagree on history layout".into()));
        }
        if seq.u[0].len() != n_u {
            return Err(Error::InvalidArgument("sequences disagree on input dimension".into()));
        }
    }
    Ok(())
}

fn run_single(
    data: &[SupervisedSequence],
    cfg: &FitConfig,
    theta0: PolicyParams,
) -> Result<EmRun> {
    let prior = cfg.prior_vec();
    let denom = transition_denominator(data);
    let total_pairs: usize = data.iter().map(|s| s.len()).sum();
    let layout = data[0].layout();

    let mut params = theta0;
    let mut trace: Vec<f64> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut prev: Option<(f64, PolicyParams)> = None;
    let mut p_warm: Option<DMatrix<f64>> = None;
    let mut iterations = 0usize;

    for k in 0..=cfg.max_iters {
        let (weights, ll_sum) = SurrogateWeights::compute(data, &params, prior.as_ref())?;
        let nat_k = params.to_natural()?;
        let obj = -ll_sum / denom + regularizer(&params.gating, &nat_k, &cfg.reg)?;

        if let Some((prev_obj, prev_params)) = &prev {
            if obj > prev_obj + 1e-12 {
                warnings.push(format!(
                    "objective rose by {:.3e} at iteration {k}; reverting to the previous \
                     iterate",
                    obj - prev_obj
                ));
                params = prev_params.clone();
                break;
            }
            if prev_obj - obj < cfg.rel_tol * (1.0 + prev_obj.abs()) {
                break;
            }
        }
        trace.push(obj);
        if k == cfg.max_iters {
            break;
        }
        iterations = k + 1;

        let gating = solve_gating_step(
            data,
            &weights,
            cfg.switching_kind,
            &cfg.reg,
            cfg.gating_grad_tol,
            Some(&params.gating),
        )?;
        let exp_surr = ExpertSurrogate::new(data, &weights)?;
        for (i, s) in exp_surr.stats.iter().enumerate() {
            if s.w_total * denom < 1e-8 * total_pairs as f64 {
                warnings.push(format!(
                    "starved mode {i} at iteration {k} (posterior mass {:.3e})",
                    s.w_total * denom
                ));
            }
        }
        let nat_new = match cfg.stability {
            StabilityOption::Off => solve_expert_step_unconstrained(&exp_surr, &cfg.reg)?,
            StabilityOption::On { epsilon_margin } => {
                let bar = cfg.barrier_config(epsilon_margin);
                let (nat, p) = solve_expert_step_stable(
                    &exp_surr,
                    &cfg.reg,
                    &layout,
                    &bar,
                    p_warm.as_ref().map(|p| (&nat_k, p)),
                )?;
                p_warm = Some(p);
                nat
            }
        };
        prev = Some((obj, params.clone()));
        params = nat_new.to_policy(gating);
    }

    let certificate = match cfg.stability {
        StabilityOption::Off => None,
        StabilityOption::On { epsilon_margin } => {
            let p = p_warm.ok_or_else(|| {
                Error::Fit("stability on but no constrained step ran".into())
            })?;
            let nat = params.to_natural()?;
            stability::check_feasibility(
                &nat,
                &p,
                0.5 * epsilon_margin * (1.0 - 1e-9),
                &layout,
            )?
            .certificate()
        }
    };

    Ok(EmRun { params, trace, warnings, certificate, iterations })
}

/// Multi-start EM fit. Starts run independently (in parallel); the winner is
/// the lowest selection score — the validation objective when `val_data` is
/// given, the training objective otherwise — with ties broken by start order.
pub fn em_fit(
    data: &[SupervisedSequence],
    val_data: Option<&[SupervisedSequence]>,
    cfg: &FitConfig,
    init: Option<&PolicyParams>,
) -> Result<FitReport> {
    cfg.validate()?;
    check_data(data)?;
    if let Some(val) = val_data {
        check_data(val)?;
    }
    let t_start = std::time::Instant::now();
    let prior = cfg.prior_vec();

    let starts: Vec<(u64, Result<PolicyParams>)> = match init {
        Some(p) => vec![(cfg.seed, Ok(p.clone()))],
        None => (0..cfg.n_starts)
            .map(|s| {
                let seed = cfg.seed.wrapping_add(s as u64);
                (seed, initialize(data, cfg.d, seed, cfg.init_strategy, cfg))
            })
            .collect(),
    };

    let runs: Vec<(u64, Result<EmRun>)> = starts
        .into_par_iter()
        .map(|(seed, theta0)| {
            let run = theta0.and_then(|t0| run_single(data, cfg, t0));
            (seed, run)
        })
        .collect();

    let score_data = val_data.unwrap_or(data);
    let mut per_start = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, f64)> = None;
    let mut outcomes: Vec<Option<EmRun>> = Vec::with_capacity(runs.len());
    for (idx, (seed, run)) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                let score = regularized_objective(score_data, &run.params, &cfg.reg, prior.as_ref());
                match score {
                    Ok(score) => {
                        per_start.push(StartSummary {
                            seed,
                            iterations: run.iterations,
                            final_objective: run.trace.last().cloned(),
                            score: Some(score),
                            error: None,
                        });
                        if best.map(|(_, s)| score < s).unwrap_or(true) {
                            best = Some((idx, score));
                        }
                        outcomes.push(Some(run));
                    }
                    Err(e) => {
                        per_start.push(StartSummary {
                            seed,
                            iterations: run.iterations,
                            final_objective: run.trace.last().cloned(),
                            score: None,
                            error: Some(e.to_string()),
                        });
                        outcomes.push(None);
                    }
                }
            }
            Err(e) => {
                per_start.push(StartSummary {
                    seed,
                    iterations: 0,
                    final_objective: None,
                    score: None,
                    error: Some(e.to_string()),
                });
                outcomes.push(None);
            }
        }
    }

    let Some((best_idx, _)) = best else {
        let details: Vec<String> = per_start
            .iter()
            .filter_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed)))
            .collect();
        return Err(Error::Fit(format!("all starts failed: {}", details.join("; "))));
    };
    let winner = outcomes[best_idx].take().expect("winner recorded");

    Ok(FitReport {
        params: winner.params,
        objective_trace: winner.trace,
        per_start,
        best_start_index: best_idx,
        wall_time_s: t_start.elapsed().as_secs_f64(),
        certificate: winner.certificate,
        warnings: winner.warnings,
    })
}

/// Build a start's initial parameters. Deterministic given the seed.
pub fn initialize(
    data: &[SupervisedSequence],
    d: usize,
    seed: u64,
    strategy: InitStrategy,
    cfg: &FitConfig,
) -> Result<PolicyParams> {
    check_data(data)?;
    if d == 0 {
        return Err(Error::InvalidArgument("mode count must be at least 1".into()));
    }
    let layout = data[0].layout();
    let n_z = layout.n_z();
    let n_u = data[0].u[0].len();

    let global = ExpertSurrogate::uniform(data)?;
    let (b_global, sigma_global) = ridge_expert(&global.stats[0], &cfg.reg)?;
    let expert_from = |b: &DMatrix<f64>, sigma: &DMatrix<f64>| Expert {
        gain: b.view((0, 0), (n_u, n_z)).into_owned(),
        offset: b.column(n_z).into_owned(),
        covariance: sigma.clone(),
    };

    let mut params = if d == 1 {
        PolicyParams {
            experts: vec![expert_from(&b_global, &sigma_global)],
            gating: Gating::zeros(cfg.switching_kind, 1, n_z),
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = match strategy {
            InitStrategy::RandomPerturbedGlobalFit => {
                let (std_u, std_z) = data_scales(data, n_u, n_z);
                (0..d)
                    .map(|_| {
                        let mut ex = expert_from(&b_global, &sigma_global);
                        for r in 0..n_u {
                            for c in 0..n_z {
                                let scale = 0.1 * std_u[r] / std_z[c];
                                ex.gain[(r, c)] += scale * normal(&mut rng);
                            }
                            ex.offset[r] += 0.1 * std_u[r] * normal(&mut rng);
                        }
                        ex
                    })
                    .collect()
            }
            InitStrategy::SegmentSplit => segment_split_experts(data, d, &cfg.reg, &expert_from)?,
        };
        let gating = {
            let mut g = Gating::zeros(cfg.switching_kind, d, n_z);
            let noise = |rng: &mut ChaCha8Rng, m: &mut DMatrix<f64>| {
                for v in m.iter_mut() {
                    *v = 0.01 * normal(rng);
                }
            };
            match &mut g {
                Gating::Static(v) => {
                    for x in v.iter_mut() {
                        *x = 0.01 * normal(&mut rng);
                    }
                }
                Gating::ModeDependent(m) | Gating::StateDependent(m) => noise(&mut rng, m),
                Gating::General(ms) => {
                    for m in ms.iter_mut() {
                        noise(&mut rng, m);
                    }
                }
            }
            g
        };
        PolicyParams { experts, gating }
    };

    // The constrained loop needs a strictly feasible first iterate: identity
    // covariances and input-gain blocks inside the unit ball (then P = I
    // witnesses feasibility).
    if cfg.stability.is_on() {
        stability::check_stability_layout(&layout, n_u)?;
        for ex in &mut params.experts {
            ex.covariance = DMatrix::identity(n_u, n_u);
            let a = ex.gain.view((0, 0), (n_u, n_u)).into_owned();
            let norm = crate::math::spectral_norm(&a);
            if norm > 0.9 {
                ex.gain.view_mut((0, 0), (n_u, n_u)).scale_mut(0.9 / (norm + 1e-9));
            }
        }
    }
    Ok(params)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn data_scales(data: &[SupervisedSequence], n_u: usize, n_z: usize) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0usize;
    let mut mean_u = vec![0.0f64; n_u];
    let mut mean_z = vec![0.0f64; n_z];
    for seq in data {
        for t in 0..seq.len() {
            count += 1;
            for r in 0..n_u {
                mean_u[r] += seq.u[t][r];
            }
            for c in 0..n_z {
                mean_z[c] += seq.z[t].values[c];
            }
        }
    }
    let n = count as f64;
    mean_u.iter_mut().for_each(|m| *m /= n);
    mean_z.iter_mut().for_each(|m| *m /= n);
    let mut var_u = vec![0.0f64; n_u];
    let mut var_z = vec![0.0f64; n_z];
    for seq in data {
        for t in 0..seq.len() {
            for r in 0..n_u {
                var_u[r] += (seq.u[t][r] - mean_u[r]).powi(2);
            }
            for c in 0..n_z {
                var_z[c] += (seq.z[t].values[c] - mean_z[c]).powi(2);
            }
        }
    }
    let std_u: Vec<f64> = var_u.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
    let std_z: Vec<f64> = var_z.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
    (std_u, std_z)
}

fn segment_split_experts(
    data: &[SupervisedSequence],
    d: usize,
    reg: &RegConfig,
    expert_from: &impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> Expert,
) -> Result<Vec<Expert>> {
    let n_u = data[0].u[0].len();
    let n_z = data[0].layout().n_z();
    let total: usize = data.iter().map(|s| s.len()).sum();
    let chunk = (total + d - 1) / d;
    let mut stats = vec![
        ModeStats {
            suu: DMatrix::zeros(n_u, n_u),
            suz: DMatrix::zeros(n_u, n_z + 1),
            szz: DMatrix::zeros(n_z + 1, n_z + 1),
            w_total: 0.0,
        };
        d
    ];
    let mut idx = 0usize;
    let mut ztil = DVector::zeros(n_z + 1);
    for seq in data {
        for t in 0..seq.len() {
            let mode = (idx / chunk).min(d - 1);
            idx += 1;
            ztil.view_mut((0, 0), (n_z, 1)).copy_from(&seq.z[t].values);
            ztil[n_z] = 1.0;
            let w = 1.0 / total as f64;
            let s = &mut stats[mode];
            s.w_total += w;
            s.suu.ger(w, &seq.u[t], &seq.u[t], 1.0);
            s.suz.ger(w, &seq.u[t], &ztil, 1.0);
            s.szz.ger(w, &ztil, &ztil, 1.0);
        }
    }
    stats
        .iter()
        .map(|s| {
            let (b, sigma) = ridge_expert(s, reg)?;
            Ok(expert_from(&b, &sigma))
        })
        .collect()
}

/// Mode-sequence generator for synthetic supervision from a known policy; the
/// labels allow recovery metrics without ever reaching the fitting path.
pub fn sample_policy_sequence(
    params: &PolicyParams,
    exo_states: &[DVector<f64>],
    seed: u64,
) -> Result<(SupervisedSequence, Vec<usize>)> {
    params.validate()?;
    let n_u = params.n_u();
    let layout = crate::model::HistoryLayout {
        n_u,
        t_u: 1,
        n_x: exo_states[0].len(),
        t_x: 0,
        n_feat: 0,
    };
    if layout.n_z() != params.n_z() {
        return Err(Error::InvalidArgument(format!(
            "policy expects n_z = {}, layout gives {}",
            params.n_z(),
            layout.n_z()
        )));
    }
    if exo_states.len() < 3 {
        return Err(Error::InvalidArgument("need at least 3 exogenous states".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.d();
    let chols = params
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| crate::math::cholesky(&e.covariance, &format!("covariance of mode {i}")))
        .collect::<Result<Vec<_>>>()?;

    let mut u_prev = DVector::zeros(n_u);
    let mut mode = rng.gen_range(0..d);
    let mut zs = Vec::with_capacity(exo_states.len());
    let mut us = Vec::with_capacity(exo_states.len());
    let mut labels = Vec::with_capacity(exo_states.len());
    for (t, x) in exo_states.iter().enumerate() {
        let mut zv = DVector::zeros(layout.n_z());
        zv.view_mut((0, 0), (n_u, 1)).copy_from(&u_prev);
        zv.view_mut((n_u, 0), (x.len(), 1)).copy_from(x);
        let z = crate::model::HistoryVector::new(zv, layout)?;
        if t > 0 {
            let probs = params.gate_probs(&z, crate::model::ModeIndex::new(mode, d)?)?;
            mode = sample_categorical(&probs, &mut rng);
        }
        let noise = DVector::from_fn(n_u, |_, _| normal(&mut rng));
        let u = params.experts[mode].mean(&z.values) + chols[mode].l() * noise;
        zs.push(z);
        us.push(u.clone());
        labels.push(mode);
        u_prev = u;
    }
    Ok((SupervisedSequence::new(zs, us, 1)?, labels))
}

pub(crate) fn sample_categorical(probs: &DVector<f64>, rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}


#[cfg(test)]
/// One stable and one unstable scalar expert under sticky switching; used by
/// the stability end-to-end tests.
pub(crate) fn learning_test_unstable_sequence(n: usize, seed: u64) -> SupervisedSequence {
    let experts = vec![
        Expert {
            gain: DMatrix::from_row_slice(1, 2, &[1.2, 0.3]),
            offset: DVector::from_row_slice(&[0.0]),
            covariance: DMatrix::from_row_slice(1, 1, &[0.0004]),
        },
        Expert {
            gain: DMatrix::from_row_slice(1, 2, &[0.4, -0.6]),
            offset: DVector::from_row_slice(&[0.1]),
            covariance: DMatrix::from_row_slice(1, 1, &[0.0004]),
        },
    ];
    let gating = Gating::ModeDependent(DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
    let gen = PolicyParams { experts, gating };
    let exo: Vec<DVector<f64>> =
        (0..n).map(|t| DVector::from_row_slice(&[(0.11 * t as f64).sin()])).collect();
    let (seq, _) = sample_policy_sequence(&gen, &exo, seed).unwrap();
    seq
}
