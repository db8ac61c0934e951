//! Latent class mixed model for short trajectories.
//!
//! Conditional on class `c_i = g`, subject `i`'s observations are
//!
//! ```text
//! y_ij = [1, t_ij]·v_g + w_i(t_ij) + ε_ij
//! ```
//!
//! with class-specific linear trends `v_g`, a within-subject process `w_i`
//! (absent, Ornstein–Uhlenbeck "AR", or Brownian motion) shared by all classes,
//! and iid noise `ε_ij ~ N(0, σ_ε²)`. Random effects are not used. Class
//! membership has constant prior weights `π_g`.

mod cov;
mod em;
mod predict;
mod select;

pub use cov::{class_cov_matrix, TimeCovariance};
pub use em::{em_fit, EmSettings};
pub use predict::{lcmm_predict, lcmm_predict_detailed, LcmmPrediction};
pub use select::{candidate_grid, select_model, ModelSelection, SelectionRow};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Subject, TrajectoryDataset};
use crate::linalg::{cholesky_with_jitter, Factor, LN_2PI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcmmError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("within-subject covariance of dimension {dim} is not positive definite even with jitter up to 1e-4")]
    NotPositiveDefinite { dim: usize },
    #[error("every start degenerated ({restarts} restarts); a class lost nearly all posterior mass")]
    Degenerate { restarts: usize },
}

/// Within-subject time covariance family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    /// No time covariance: `σ_ε² I`.
    Nc,
    /// Exponential decay in the time gap.
    Ar,
    /// Brownian motion, covariance `min(t, t')`.
    Bm,
}

impl CovKind {
    pub const ALL: [CovKind; 3] = [CovKind::Nc, CovKind::Ar, CovKind::Bm];

    /// Free parameters of `w_i`.
    pub fn n_params(self) -> usize {
        match self {
            CovKind::Nc => 0,
            CovKind::Ar => 2,
            CovKind::Bm => 1,
        }
    }
}

impl std::fmt::Display for CovKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovKind::Nc => "NC",
            CovKind::Ar => "AR",
            CovKind::Bm => "BM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcmmSpec {
    pub n_classes: usize,
    pub cov_kind: CovKind,
}

impl LcmmSpec {
    pub fn new(n_classes: usize, cov_kind: CovKind) -> Self {
        Self { n_classes, cov_kind }
    }

    /// `2G` trend coefficients, `G − 1` weights, the `w_i` parameters and `σ_ε²`.
    /// The shared effect β is pinned to zero and not counted.
    pub fn n_params(&self) -> usize {
        2 * self.n_classes + (self.n_classes - 1) + self.cov_kind.n_params() + 1
    }

    /// Short label such as `NC3`.
    pub fn label(&self) -> String {
        format!("{}{}", self.cov_kind, self.n_classes)
    }
}

/// Model parameters for a given [`LcmmSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcmmParams {
    pub pi: Vec<f64>,
    /// Per class `[intercept, slope per year]`.
    pub v: Vec<[f64; 2]>,
    pub within: TimeCovariance,
    pub sigma_eps2: f64,
}

impl LcmmParams {
    pub fn validate(&self, spec: &LcmmSpec) -> Result<(), LcmmError> {
        let bad = |m: String| Err(LcmmError::InvalidParams(m));
        if spec.n_classes == 0 {
            return bad("n_classes must be >= 1".into());
        }
        if self.pi.len() != spec.n_classes || self.v.len() != spec.n_classes {
            return bad(format!("expected {} classes in pi and v", spec.n_classes));
        }
        if self.pi.iter().any(|p| !(*p > 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return bad("pi must be positive and sum to 1".into());
        }
        if self.v.iter().flatten().any(|x| !x.is_finite()) {
            return bad("v must be finite".into());
        }
        if !(self.sigma_eps2 > 0.0) || !self.sigma_eps2.is_finite() {
            return bad("sigma_eps2 must be finite and > 0".into());
        }
        if self.within.kind() != spec.cov_kind {
            return bad(format!("within-subject parameters are {} but spec is {}", self.within.kind(), spec.cov_kind));
        }
        self.within.validate()
    }

    pub fn class_mean(&self, class: usize, t: f64) -> f64 {
        self.v[class][0] + self.v[class][1] * t
    }
}

/// Factor of one subject's covariance, shared by every class.
pub(crate) enum SubjectCov {
    /// `σ² I`
    Iid(f64),
    Full(Factor),
}

impl SubjectCov {
    pub(crate) fn new(times: &[f64], within: &TimeCovariance, sigma_eps2: f64) -> Result<Self, LcmmError> {
        if matches!(within, TimeCovariance::None) {
            return Ok(SubjectCov::Iid(sigma_eps2));
        }
        let m = class_cov_matrix(times, within, sigma_eps2)?;
        let (f, _) = cholesky_with_jitter(&m, 0.0).ok_or(LcmmError::NotPositiveDefinite { dim: times.len() })?;
        Ok(SubjectCov::Full(f))
    }

    pub(crate) fn logpdf(&self, resid: &DVector<f64>) -> f64 {
        match self {
            SubjectCov::Iid(s2) => {
                let n = resid.len() as f64;
                -0.5 * resid.norm_squared() / s2 - 0.5 * n * (s2.ln() + LN_2PI)
            }
            SubjectCov::Full(f) => f.gaussian_logpdf(resid),
        }
    }

    /// `L⁻¹ M` (or `M / σ` for iid).
    pub(crate) fn whiten_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SubjectCov::Iid(s2) => m / s2.sqrt(),
            SubjectCov::Full(f) => f.whiten_mat(m),
        }
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SubjectCov::Iid(s2) => b / *s2,
            SubjectCov::Full(f) => f.solve(b),
        }
    }
}

pub(crate) fn design(times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), 2, |i, j| if j == 0 { 1.0 } else { times[i] })
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-class `log π_g + log N(y | X v_g, Σ)` for one subject.
pub(crate) fn subject_class_terms(subject: &Subject, params: &LcmmParams) -> Result<Vec<f64>, LcmmError> {
    let times: Vec<f64> = subject.times().collect();
    let y = DVector::from_iterator(times.len(), subject.values());
    let cov = SubjectCov::new(&times, &params.within, params.sigma_eps2)?;
    Ok((0..params.v.len())
        .map(|g| {
            let resid = DVector::from_fn(times.len(), |i, _| y[i] - params.class_mean(g, times[i]));
            params.pi[g].ln() + cov.logpdf(&resid)
        })
        .collect())
}

/// `Σ_i log Σ_g π_g N(y_i | X_i v_g, Σ_i)`
pub fn lcmm_loglik(data: &TrajectoryDataset, spec: &LcmmSpec, params: &LcmmParams) -> Result<f64, LcmmError> {
    params.validate(spec)?;
    let mut total = 0.0;
    for s in data.subjects() {
        total += log_sum_exp(&subject_class_terms(s, params)?);
    }
    Ok(total)
}

/// `−2 loglik + n_params · ln(n)`
pub fn bic_value(loglik: f64, n_params: usize, n_subjects: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (n_subjects as f64).ln()
}

/// A fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcmmFit {
    pub spec: LcmmSpec,
    /// Shared fixed effect, pinned at zero (absorbed into `v`).
    pub beta: [f64; 2],
    #[serde(flatten)]
    pub params: LcmmParams,
    pub loglik: f64,
    pub n_params: usize,
    pub bic: f64,
    pub subject_ids: Vec<String>,
    /// Row `i` is subject `i`'s class posterior.
    pub posteriors: Vec<Vec<f64>>,
    /// Observed log-likelihood after each EM iteration of the winning start.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate_starts: usize,
}

pub fn bic(fit: &LcmmFit, n_subjects: usize) -> f64 {
    bic_value(fit.loglik, fit.n_params, n_subjects)
}
