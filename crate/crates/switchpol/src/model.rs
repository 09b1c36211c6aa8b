//! Domain types for the switching policy: history vectors, per-mode experts,
//! gating, and the natural (precision-scaled) parameterization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, softmax};

/// Slot layout of a history vector: `[u-lag block | x-lag block | features]`.
///
/// The u-lag block holds `t_u` blocks of `n_u` (most recent first), the x block
/// holds `t_x + 1` blocks of `n_x` (current state first), and `n_feat`
/// exogenous feature slots follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLayout {
    pub n_u: usize,
    pub t_u: usize,
    pub n_x: usize,
    pub t_x: usize,
    pub n_feat: usize,
}

impl HistoryLayout {
    pub fn n_z(&self) -> usize {
        self.t_u * self.n_u + (self.t_x + 1) * self.n_x + self.n_feat
    }

    /// Slot range of the input lagged by `lag` steps (`lag` in `1..=t_u`).
    pub fn u_lag_range(&self, lag: usize) -> std::ops::Range<usize> {
        assert!(lag >= 1 && lag <= self.t_u, "u-lag {lag} out of range");
        let start = (lag - 1) * self.n_u;
        start..start + self.n_u
    }

    /// Slot range of the state lagged by `lag` steps (`lag` in `0..=t_x`).
    pub fn x_lag_range(&self, lag: usize) -> std::ops::Range<usize> {
        assert!(lag <= self.t_x, "x-lag {lag} out of range");
        let start = self.t_u * self.n_u + lag * self.n_x;
        start..start + self.n_x
    }

    pub fn feat_range(&self) -> std::ops::Range<usize> {
        let start = self.t_u * self.n_u + (self.t_x + 1) * self.n_x;
        start..start + self.n_feat
    }
}

/// The regressor `z_t`: stacked input lags, state lags, and exogenous features.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryVector {
    pub values: DVector<f64>,
    pub layout: HistoryLayout,
}

impl HistoryVector {
    pub fn new(values: DVector<f64>, layout: HistoryLayout) -> Result<Self> {
        if values.len() != layout.n_z() {
            return Err(Error::Layout(format!(
                "history vector has {} slots, layout requires {}",
                values.len(),
                layout.n_z()
            )));
        }
        Ok(Self { values, layout })
    }
}

/// Index of an active mode, checked against the mode count on construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeIndex(usize);

impl ModeIndex {
    pub fn new(index: usize, d: usize) -> Result<Self> {
        if index >= d {
            return Err(Error::InvalidArgument(format!(
                "mode index {index} out of range for {d} modes"
            )));
        }
        Ok(ModeIndex(index))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Which variables the switching mechanism conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchingKind {
    /// Gate depends on both the history vector and the previous mode.
    General,
    /// Gate is a fixed categorical distribution.
    Static,
    /// Gate depends only on the previous mode (Markov chain).
    ModeDependent,
    /// Gate depends only on the history vector (classic mixture of experts).
    StateDependent,
}

/// Gating parameters, stored per switching kind so tied parameters exist once.
#[derive(Debug, Clone, PartialEq)]
pub enum Gating {
    /// One shared logit row of length `d`.
    Static(DVector<f64>),
    /// `d × d` matrix; row `i` holds the logits used when the previous mode is `i`.
    ModeDependent(DMatrix<f64>),
    /// One shared `n_z × d` matrix.
    StateDependent(DMatrix<f64>),
    /// `d` distinct `n_z × d` matrices, indexed by the previous mode.
    General(Vec<DMatrix<f64>>),
}

impl Gating {
    pub fn kind(&self) -> SwitchingKind {
        match self {
            Gating::Static(_) => SwitchingKind::Static,
            Gating::ModeDependent(_) => SwitchingKind::ModeDependent,
            Gating::StateDependent(_) => SwitchingKind::StateDependent,
            Gating::General(_) => SwitchingKind::General,
        }
    }

    /// Zero-initialized gating of the given kind (uniform gate probabilities).
    pub fn zeros(kind: SwitchingKind, d: usize, n_z: usize) -> Self {
        match kind {
            SwitchingKind::Static => Gating::Static(DVector::zeros(d)),
            SwitchingKind::ModeDependent => Gating::ModeDependent(DMatrix::zeros(d, d)),
            SwitchingKind::StateDependent => Gating::StateDependent(DMatrix::zeros(n_z, d)),
            SwitchingKind::General => {
                Gating::General((0..d).map(|_| DMatrix::zeros(n_z, d)).collect())
            }
        }
    }
}

/// One linear-Gaussian expert: `u = K z + b + w`, `w ~ N(0, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `K`: `n_u × n_z` gain matrix.
    pub gain: DMatrix<f64>,
    /// `b`: `n_u` offset.
    pub offset: DVector<f64>,
    /// `Σ`: `n_u × n_u` symmetric positive definite covariance.
    pub covariance: DMatrix<f64>,
}

impl Expert {
    pub fn mean(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.gain * z + &self.offset
    }
}

/// The learned policy `θ`: `d` experts plus the gating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub experts: Vec<Expert>,
    pub gating: Gating,
}

impl PolicyParams {
    pub fn d(&self) -> usize {
        self.experts.len()
    }

    pub fn n_u(&self) -> usize {
        self.experts[0].gain.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.experts[0].gain.ncols()
    }

    pub fn switching_kind(&self) -> SwitchingKind {
        self.gating.kind()
    }

    /// Check dimensional consistency, covariance positive definiteness, and
    /// kind-specific gating shapes.
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::InvalidArgument("policy has no experts".into()));
        }
        let d = self.d();
        let n_u = self.n_u();
        let n_z = self.n_z();
        for (i, ex) in self.experts.iter().enumerate() {
            if ex.gain.nrows() != n_u || ex.gain.ncols() != n_z {
                return Err(Error::InvalidArgument(format!(
                    "expert {i}: gain is {}x{}, expected {n_u}x{n_z}",
                    ex.gain.nrows(),
                    ex.gain.ncols()
                )));
            }
            if ex.offset.len() != n_u {
                return Err(Error::InvalidArgument(format!(
                    "expert {i}: offset length {} != {n_u}",
                    ex.offset.len()
                )));
            }
            if ex.covariance.nrows() != n_u || ex.covariance.ncols() != n_u {
                return Err(Error::InvalidArgument(format!(
                    "expert {i}: covariance is {}x{}, expected {n_u}x{n_u}",
                    ex.covariance.nrows(),
                    ex.covariance.ncols()
                )));
            }
            let asym = (&ex.covariance - ex.covariance.transpose()).norm();
            if asym > 1e-9 * (1.0 + ex.covariance.norm()) {
                return Err(Error::InvalidArgument(format!(
                    "expert {i}: covariance not symmetric (asymmetry {asym:.3e})"
                )));
            }
            math::cholesky(&ex.covariance, &format!("covariance of mode {i}"))?;
        }
        match &self.gating {
            Gating::Static(row) if row.len() == d => {}
            Gating::ModeDependent(m) if m.nrows() == d && m.ncols() == d => {}
            Gating::StateDependent(m) if m.nrows() == n_z && m.ncols() == d => {}
            Gating::General(ms)
                if ms.len() == d && ms.iter().all(|m| m.nrows() == n_z && m.ncols() == d) => {}
            g => {
                return Err(Error::InvalidArgument(format!(
                    "gating shape inconsistent with kind {:?} (d={d}, n_z={n_z})",
                    g.kind()
                )))
            }
        }
        Ok(())
    }

    /// Gate distribution `p(ξ_t | z_t, ξ_{t−1}=prev)` for the stored kind.
    pub fn gate_probs(&self, z: &HistoryVector, prev: ModeIndex) -> Result<DVector<f64>> {
        if prev.get() >= self.d() {
            return Err(Error::InvalidArgument(format!(
                "previous mode {} out of range for d={}",
                prev.get(),
                self.d()
            )));
        }
        let logits = self.gate_logits(&z.values, prev.get())?;
        softmax(&logits)
    }

    /// Gate logits on raw slot values; `prev` must be in range.
    pub(crate) fn gate_logits(&self, z: &DVector<f64>, prev: usize) -> Result<DVector<f64>> {
        match &self.gating {
            Gating::Static(row) => Ok(row.clone()),
            Gating::ModeDependent(m) => Ok(m.row(prev).transpose()),
            Gating::StateDependent(theta) => {
                if theta.nrows() != z.len() {
                    return Err(Error::InvalidArgument(format!(
                        "gating expects z of dimension {}, got {}",
                        theta.nrows(),
                        z.len()
                    )));
                }
                Ok(theta.transpose() * z)
            }
            Gating::General(thetas) => {
                let theta = &thetas[prev];
                if theta.nrows() != z.len() {
                    return Err(Error::InvalidArgument(format!(
                        "gating expects z of dimension {}, got {}",
                        theta.nrows(),
                        z.len()
                    )));
                }
                Ok(theta.transpose() * z)
            }
        }
    }

    /// Reparameterize every expert as `(C_i, Λ_i)` with `C_i = Σ_i⁻¹[K_i b_i]`,
    /// `Λ_i = Σ_i⁻¹`.
    pub fn to_natural(&self) -> Result<NaturalParams> {
        let modes = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let chol = math::cholesky(&ex.covariance, &format!("covariance of mode {i}"))?;
                let n_u = ex.gain.nrows();
                let n_z = ex.gain.ncols();
                let mut kb = DMatrix::zeros(n_u, n_z + 1);
                kb.view_mut((0, 0), (n_u, n_z)).copy_from(&ex.gain);
                kb.column_mut(n_z).copy_from(&ex.offset);
                let coeff = chol.solve(&kb);
                let precision = chol.inverse();
                NaturalMode::new(coeff, 0.5 * (&precision + precision.transpose()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NaturalParams { modes })
    }
}

/// One expert in natural parameters, with a cached factorization of `Λ`.
#[derive(Debug, Clone)]
pub struct NaturalMode {
    /// `C = Σ⁻¹[K b]`: `n_u × (n_z + 1)`.
    pub coeff: DMatrix<f64>,
    /// `Λ = Σ⁻¹`: `n_u × n_u` symmetric positive definite.
    pub precision: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl NaturalMode {
    pub fn new(coeff: DMatrix<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let chol = math::cholesky(&precision, "natural-parameter precision")?;
        Ok(Self { coeff, precision, chol })
    }

    pub fn n_u(&self) -> usize {
        self.precision.nrows()
    }

    /// Regressor dimension `n_z` (the coefficient matrix has one extra column
    /// for the offset).
    pub fn n_z(&self) -> usize {
        self.coeff.ncols() - 1
    }

    pub(crate) fn precision_chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Recover `(K, b, Σ)` from `(C, Λ)`.
    pub fn to_expert(&self) -> Expert {
        let sigma = self.chol.inverse();
        let sigma = 0.5 * (&sigma + sigma.transpose());
        let kb = self.chol.solve(&self.coeff);
        let n_z = self.n_z();
        Expert {
            gain: kb.view((0, 0), (kb.nrows(), n_z)).into_owned(),
            offset: kb.column(n_z).into_owned(),
            covariance: sigma,
        }
    }
}

/// All experts in natural parameters `𝔅 = {(C_i, Λ_i)}`.
#[derive(Debug, Clone)]
pub struct NaturalParams {
    pub modes: Vec<NaturalMode>,
}

impl NaturalParams {
    pub fn d(&self) -> usize {
        self.modes.len()
    }

    /// Recover `(K_i, b_i, Σ_i)` for every mode.
    pub fn to_experts(&self) -> Vec<Expert> {
        self.modes.iter().map(NaturalMode::to_expert).collect()
    }

    /// Rebuild a policy with this natural parameterization and the given gating.
    pub fn to_policy(&self, gating: Gating) -> PolicyParams {
        PolicyParams { experts: self.to_experts(), gating }
    }
}

// ---------------------------------------------------------------------------
// JSON serialization ("switchpol-params-v1")
// ---------------------------------------------------------------------------

pub const PARAMS_FORMAT_VERSION: &str = "switchpol-params-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major nested rows.
    pub data: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
                .collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows || self.data.iter().any(|r| r.len() != self.cols) {
            return Err(Error::InvalidArgument(format!(
                "matrix data does not match declared shape {}x{}",
                self.rows, self.cols
            )));
        }
        let flat: Vec<f64> = self.data.iter().flatten().cloned().collect();
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &flat))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertJson {
    gain: MatrixJson,
    offset: Vec<f64>,
    covariance: MatrixJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
enum GatingJson {
    Static { logits: Vec<f64> },
    ModeDependent { logits: MatrixJson },
    StateDependent { theta: MatrixJson },
    General { thetas: Vec<MatrixJson> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyParamsJson {
    version: String,
    d: usize,
    n_u: usize,
    n_z: usize,
    switching_kind: SwitchingKind,
    experts: Vec<ExpertJson>,
    gating: GatingJson,
}

impl PolicyParams {
    pub fn to_json(&self) -> Result<serde_json::Value> {
        self.validate()?;
        let gating = match &self.gating {
            Gating::Static(row) => GatingJson::Static { logits: row.iter().cloned().collect() },
            Gating::ModeDependent(m) => {
                GatingJson::ModeDependent { logits: MatrixJson::from_matrix(m) }
            }
            Gating::StateDependent(m) => {
                GatingJson::StateDependent { theta: MatrixJson::from_matrix(m) }
            }
            Gating::General(ms) => {
                GatingJson::General { thetas: ms.iter().map(MatrixJson::from_matrix).collect() }
            }
        };
        let doc = PolicyParamsJson {
            version: PARAMS_FORMAT_VERSION.to_string(),
            d: self.d(),
            n_u: self.n_u(),
            n_z: self.n_z(),
            switching_kind: self.switching_kind(),
            experts: self
                .experts
                .iter()
                .map(|ex| ExpertJson {
                    gain: MatrixJson::from_matrix(&ex.gain),
                    offset: ex.offset.iter().cloned().collect(),
                    covariance: MatrixJson::from_matrix(&ex.covariance),
                })
                .collect(),
            gating,
        };
        serde_json::to_value(&doc).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let doc: PolicyParamsJson = serde_json::from_value(value.clone())
            .map_err(|e| Error::Parse { path: "<params json>".into(), detail: e.to_string() })?;
        if doc.version != PARAMS_FORMAT_VERSION {
            return Err(Error::Parse {
                path: "<params json>".into(),
                detail: format!(
                    "unsupported version {:?}, expected {PARAMS_FORMAT_VERSION:?}",
                    doc.version
                ),
            });
        }
        let experts = doc
            .experts
            .iter()
            .map(|ex| {
                Ok(Expert {
                    gain: ex.gain.to_matrix()?,
                    offset: DVector::from_row_slice(&ex.offset),
                    covariance: ex.covariance.to_matrix()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gating = match &doc.gating {
            GatingJson::Static { logits } => Gating::Static(DVector::from_row_slice(logits)),
            GatingJson::ModeDependent { logits } => Gating::ModeDependent(logits.to_matrix()?),
            GatingJson::StateDependent { theta } => Gating::StateDependent(theta.to_matrix()?),
            GatingJson::General { thetas } => Gating::General(
                thetas.iter().map(MatrixJson::to_matrix).collect::<Result<Vec<_>>>()?,
            ),
        };
        let params = PolicyParams { experts, gating };
        params.validate()?;
        if params.d() != doc.d || params.n_u() != doc.n_u || params.n_z() != doc.n_z {
            return Err(Error::Parse {
                path: "<params json>".into(),
                detail: "declared shape metadata does not match parameter shapes".into(),
            });
        }
        if params.switching_kind() != doc.switching_kind {
            return Err(Error::Parse {
                path: "<params json>".into(),
                detail: "switching_kind tag does not match gating payload".into(),
            });
        }
        Ok(params)
    }
}
