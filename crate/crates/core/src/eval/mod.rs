//! Final-time-point hold-out evaluation: splits, metrics, repeated trials and
//! model comparison.

mod compare;
mod metrics;
mod split;
mod trials;

pub use compare::{compare_models, Comparison, ComparisonRow, FigureRow};
pub use metrics::{adjusted_rand_index, pearson, rmse, Summary};
pub use split::{holdout_count, make_holdout_split, HeldOut, HoldoutSplit};
pub use trials::{run_trials, FittedModel, ModelConfig, PooledMetrics, TrajectoryModel, TrialMetrics, TrialReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hold-out fraction {0} must be in [0, 1)")]
    InvalidFraction(f64),
    #[error("need {wanted} subjects with at least two observations, only {eligible} available")]
    NotEnoughSubjects { wanted: usize, eligible: usize },
    #[error("predictions ({preds}) and truths ({truths}) must have equal non-zero length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("correlation is undefined for a constant vector")]
    ZeroVariance,
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("model failure: {0}")]
    Model(String),
    #[error("{failed} of {trials} trials failed (more than 20%)")]
    FailureRateExceeded { failed: usize, trials: usize },
    #[error("comparison needs at least two reports, got {0}")]
    TooFewReports(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Run `f` on a rayon pool with `jobs` workers (at least one).
pub(crate) fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {jobs}-thread pool ({e}); running on the global pool");
            f()
        }
    }
}
