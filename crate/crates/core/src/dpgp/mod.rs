//! Dirichlet-process mixture of Gaussian processes.
//!
//! Subjects are partitioned by a Chinese restaurant process; each block shares
//! a latent GP trend which is integrated out analytically, so the sampler only
//! ever moves subjects between blocks (see [`gibbs_sweep`]). Hyperparameters
//! are shared by all clusters and held fixed during a chain; [`grid_search`]
//! picks them by held-out RMSE.

mod crp;
mod gibbs;
mod grid;
mod predict;

pub use crp::{crp_log_prior, crp_prior_weights, ClusterId, CrpState, CrpWeights};
pub use gibbs::{fit_dpgp, gibbs_sweep, joint_log_likelihood, DpgpPosterior, PosteriorSummary, SamplerSettings};
pub use grid::{grid_search, GridRow, GridSearchConfig, GridSearchResult};
pub use predict::dpgp_predict;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{ClusterCovConfig, KernelError, KernelParams};
use crate::linalg::DEFAULT_JITTER;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpgpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("inconsistent CRP state: {0}")]
    InvalidState(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("hold-out split failed: {0}")]
    Holdout(String),
}

/// Shared kernel configuration plus CRP concentration.
///
/// Serializes flat, as one entry of a grid specification file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "FlatHyper", into = "FlatHyper")]
pub struct DpgpHyperParams {
    pub cov: ClusterCovConfig,
    pub alpha: f64,
}

impl DpgpHyperParams {
    pub fn new(cov: ClusterCovConfig, alpha: f64) -> Self {
        Self { cov, alpha }
    }

    pub fn validate(&self) -> Result<(), DpgpError> {
        self.cov.validate()?;
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(DpgpError::InvalidSettings(format!("alpha {} must be finite and > 0", self.alpha)));
        }
        Ok(())
    }
}

impl Default for DpgpHyperParams {
    fn default() -> Self {
        Self {
            cov: ClusterCovConfig::new(
                KernelParams { variance: 1.5, lengthscale: 3.0 },
                KernelParams { variance: 0.09, lengthscale: 1.5 },
                0.0625,
            ),
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct FlatHyper {
    latent_variance: f64,
    latent_lengthscale: f64,
    indiv_variance: f64,
    indiv_lengthscale: f64,
    nugget: f64,
    alpha: f64,
    #[serde(default = "default_jitter", skip_serializing_if = "is_default_jitter")]
    jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

fn is_default_jitter(j: &f64) -> bool {
    *j == DEFAULT_JITTER
}

impl From<FlatHyper> for DpgpHyperParams {
    fn from(f: FlatHyper) -> Self {
        Self {
            cov: ClusterCovConfig {
                latent: KernelParams { variance: f.latent_variance, lengthscale: f.latent_lengthscale },
                individual: KernelParams { variance: f.indiv_variance, lengthscale: f.indiv_lengthscale },
                nugget: f.nugget,
                jitter: f.jitter,
            },
            alpha: f.alpha,
        }
    }
}

impl From<DpgpHyperParams> for FlatHyper {
    fn from(h: DpgpHyperParams) -> Self {
        Self {
            latent_variance: h.cov.latent.variance,
            latent_lengthscale: h.cov.latent.lengthscale,
            indiv_variance: h.cov.individual.variance,
            indiv_lengthscale: h.cov.individual.lengthscale,
            nugget: h.cov.nugget,
            alpha: h.alpha,
            jitter: h.cov.jitter,
        }
    }
}
