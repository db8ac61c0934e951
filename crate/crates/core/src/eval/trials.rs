use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_holdout_split, pearson, rmse, with_pool, EvalError, Summary};
use crate::data::TrajectoryDataset;
use crate::dpgp::{dpgp_predict, fit_dpgp, DpgpHyperParams, DpgpPosterior, SamplerSettings};
use crate::lcmm::{em_fit, lcmm_predict, EmSettings, LcmmFit, LcmmSpec};
use crate::seed::{derive_rng, Rng};

/// A fit procedure with fixed settings.
pub trait TrajectoryModel: Sync {
    fn tag(&self) -> String;
    fn fit(&self, train: &TrajectoryDataset, rng: &mut Rng) -> Result<Box<dyn FittedModel>, EvalError>;
}

pub trait FittedModel: Send {
    /// Predict `(subject index, time)` queries; `train` is the dataset the
    /// model was fit on.
    fn predict(&self, train: &TrajectoryDataset, queries: &[(usize, f64)]) -> Result<Vec<f64>, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Dpgp { hyper: DpgpHyperParams, sampler: SamplerSettings },
    Lcmm { spec: LcmmSpec, em: EmSettings },
}

struct Posterior(DpgpPosterior);
struct Lcmm(LcmmFit);

impl FittedModel for Posterior {
    fn predict(&self, train: &TrajectoryDataset, queries: &[(usize, f64)]) -> Result<Vec<f64>, EvalError> {
        dpgp_predict(&self.0, train, queries).map_err(|e| EvalError::Model(e.to_string()))
    }
}

impl FittedModel for Lcmm {
    fn predict(&self, train: &TrajectoryDataset, queries: &[(usize, f64)]) -> Result<Vec<f64>, EvalError> {
        queries
            .iter()
            .map(|&(i, t)| {
                lcmm_predict(&self.0, train.subject(i).observations(), t).map_err(|e| EvalError::Model(e.to_string()))
            })
            .collect()
    }
}

impl TrajectoryModel for ModelConfig {
    fn tag(&self) -> String {
        match self {
            ModelConfig::Dpgp { .. } => "DPGP".into(),
            ModelConfig::Lcmm { spec, .. } => spec.label(),
        }
    }

    fn fit(&self, train: &TrajectoryDataset, rng: &mut Rng) -> Result<Box<dyn FittedModel>, EvalError> {
        match self {
            ModelConfig::Dpgp { hyper, sampler } => fit_dpgp(train, hyper, sampler, rng)
                .map(|p| Box::new(Posterior(p)) as Box<dyn FittedModel>)
                .map_err(|e| EvalError::Model(e.to_string())),
            ModelConfig::Lcmm { spec, em } => em_fit(train, spec, em, rng)
                .map(|f| Box::new(Lcmm(f)) as Box<dyn FittedModel>)
                .map_err(|e| EvalError::Model(e.to_string())),
        }
    }
}

/// All held-out points of the successful trials scored together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub n_points: usize,
    pub rmse: Option<f64>,
    pub correlation: Option<f64>,
}

/// The deterministic part of a [`TrialReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub model: String,
    pub n_trials: usize,
    pub fraction: f64,
    pub seed: u64,
    /// Held-out subjects per trial.
    pub n_heldout: usize,
    /// Per trial; `null` for a failed trial.
    pub rmse: Vec<Option<f64>>,
    /// Per trial; `null` for a failed trial or constant predictions.
    pub correlation: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
    pub n_failed: usize,
    pub rmse_summary: Option<Summary>,
    pub correlation_summary: Option<Summary>,
    pub pooled: PooledMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    #[serde(flatten)]
    pub metrics: TrialMetrics,
    /// Per-trial fit wall-clock seconds; `null` for a failed trial.
    pub fit_seconds: Vec<Option<f64>>,
    pub fit_seconds_summary: Option<Summary>,
}

struct TrialOutcome {
    preds: Vec<f64>,
    truths: Vec<f64>,
    seconds: f64,
}

fn run_one(
    model: &dyn TrajectoryModel,
    data: &TrajectoryDataset,
    fraction: f64,
    seed: u64,
    trial: usize,
) -> Result<TrialOutcome, EvalError> {
    let split = make_holdout_split(data, fraction, &mut derive_rng(seed, "split", trial as u64))?;
    let mut rng = derive_rng(seed, "fit", trial as u64);
    let start = Instant::now();
    let fitted = model.fit(&split.train, &mut rng)?;
    let seconds = start.elapsed().as_secs_f64();
    let preds = fitted.predict(&split.train, &split.queries())?;
    Ok(TrialOutcome { preds, truths: split.truths(), seconds })
}

/// Repeat split → fit → predict `n_trials` times with per-trial derived seeds.
///
/// Failed trials are logged and left out of the summaries; more than 20%
/// failures is an error. With `jobs > 1` trials run concurrently, which
/// skews wall-clock figures.
pub fn run_trials(
    model: &dyn TrajectoryModel,
    data: &TrajectoryDataset,
    fraction: f64,
    n_trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<TrialReport, EvalError> {
    if n_trials == 0 {
        return Err(EvalError::InvalidSettings("n_trials must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    let n_heldout = super::holdout_count(fraction, data.len());
    if n_heldout == 0 {
        return Err(EvalError::InvalidSettings(format!("fraction {fraction} holds out no subjects")));
    }
    let outcomes: Vec<Result<TrialOutcome, EvalError>> =
        with_pool(jobs, || (0..n_trials).into_par_iter().map(|t| run_one(model, data, fraction, seed, t)).collect());

    let tag = model.tag();
    let mut rmse_list = Vec::with_capacity(n_trials);
    let mut corr_list = Vec::with_capacity(n_trials);
    let mut seconds = Vec::with_capacity(n_trials);
    let mut errors = Vec::with_capacity(n_trials);
    let (mut all_preds, mut all_truths) = (Vec::new(), Vec::new());
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome.and_then(|o| rmse(&o.preds, &o.truths).map(|r| (o, r))) {
            Ok((o, r)) => {
                rmse_list.push(Some(r));
                corr_list.push(pearson(&o.preds, &o.truths).ok());
                seconds.push(Some(o.seconds));
                errors.push(None);
                all_preds.extend(o.preds);
                all_truths.extend(o.truths);
            }
            Err(e) => {
                if matches!(e, EvalError::NotEnoughSubjects { .. }) {
                    return Err(e);
                }
                log::warn!("{tag} trial {t} failed: {e}");
                rmse_list.push(None);
                corr_list.push(None);
                seconds.push(None);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let n_failed = errors.iter().filter(|e| e.is_some()).count();
    if n_failed * 5 > n_trials {
        return Err(EvalError::FailureRateExceeded { failed: n_failed, trials: n_trials });
    }
    let present = |v: &[Option<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let pooled = PooledMetrics {
        n_points: all_preds.len(),
        rmse: rmse(&all_preds, &all_truths).ok(),
        correlation: pearson(&all_preds, &all_truths).ok(),
    };
    let metrics = TrialMetrics {
        model: tag,
        n_trials,
        fraction,
        seed,
        n_heldout,
        rmse_summary: Summary::of(&present(&rmse_list)),
        correlation_summary: Summary::of(&present(&corr_list)),
        rmse: rmse_list,
        correlation: corr_list,
        errors,
        n_failed,
        pooled,
    };
    Ok(TrialReport { metrics, fit_seconds_summary: Summary::of(&present(&seconds)), fit_seconds: seconds })
}
