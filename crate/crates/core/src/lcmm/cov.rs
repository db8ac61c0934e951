use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{CovKind, LcmmError};

/// Parameters of the within-subject process `w_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimeCovariance {
    None,
    /// `σ_w² exp(−θ_w |t − t'|)`
    Ar {
        variance: f64,
        decay: f64,
    },
    /// `σ_w² min(t, t')`
    Bm {
        variance: f64,
    },
}

impl TimeCovariance {
    pub fn kind(&self) -> CovKind {
        match self {
            TimeCovariance::None => CovKind::Nc,
            TimeCovariance::Ar { .. } => CovKind::Ar,
            TimeCovariance::Bm { .. } => CovKind::Bm,
        }
    }

    pub fn validate(&self) -> Result<(), LcmmError> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        let valid = match *self {
            TimeCovariance::None => true,
            TimeCovariance::Ar { variance, decay } => ok(variance) && ok(decay),
            TimeCovariance::Bm { variance } => ok(variance),
        };
        if valid {
            Ok(())
        } else {
            Err(LcmmError::InvalidParams(format!("{self:?}: parameters must be finite and > 0")))
        }
    }

    /// Covariance of `w` at two times.
    #[inline]
    pub fn cov(&self, t: f64, t2: f64) -> f64 {
        match *self {
            TimeCovariance::None => 0.0,
            TimeCovariance::Ar { variance, decay } => variance * (-decay * (t - t2).abs()).exp(),
            TimeCovariance::Bm { variance } => variance * t.min(t2),
        }
    }
}

/// `Cov(w) + σ_ε² I` at the given (strictly increasing) times.
pub fn class_cov_matrix(times: &[f64], within: &TimeCovariance, sigma_eps2: f64) -> Result<DMatrix<f64>, LcmmError> {
    within.validate()?;
    if !(sigma_eps2 > 0.0) || !sigma_eps2.is_finite() {
        return Err(LcmmError::InvalidParams(format!("sigma_eps2 {sigma_eps2} must be finite and > 0")));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LcmmError::InvalidData("times must be strictly increasing".into()));
    }
    let n = times.len();
    Ok(DMatrix::from_fn(n, n, |i, j| within.cov(times[i], times[j]) + if i == j { sigma_eps2 } else { 0.0 }))
}
