use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dpgp_predict, fit_dpgp, DpgpError, DpgpHyperParams, SamplerSettings};
use crate::data::TrajectoryDataset;
use crate::eval::{make_holdout_split, rmse, with_pool, HoldoutSplit};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    pub fraction: f64,
    pub trials: usize,
    pub seed: u64,
    pub sampler: SamplerSettings,
    pub jobs: usize,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self { fraction: 0.3, trials: 5, seed: 0, sampler: SamplerSettings::default(), jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub hyper: DpgpHyperParams,
    /// `+inf` when any trial failed.
    pub mean_rmse: f64,
    pub trial_rmse: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: DpgpHyperParams,
    pub best_index: usize,
    pub table: Vec<GridRow>,
}

fn score_point(
    splits: &[HoldoutSplit],
    hyper: &DpgpHyperParams,
    cfg: &GridSearchConfig,
) -> Result<Vec<f64>, DpgpError> {
    splits
        .iter()
        .enumerate()
        .map(|(t, split)| {
            let mut rng = derive_rng(cfg.seed, "grid-fit", t as u64);
            let post = fit_dpgp(&split.train, hyper, &cfg.sampler, &mut rng)?;
            let queries = split.queries();
            let preds = dpgp_predict(&post, &split.train, &queries)?;
            rmse(&preds, &split.truths()).map_err(|e| DpgpError::NumericalFailure(e.to_string()))
        })
        .collect()
}

/// Score every grid point by mean held-out RMSE over `cfg.trials` splits (the
/// same splits for every point) and return the first minimizer.
pub fn grid_search(
    data: &TrajectoryDataset,
    grid: &[DpgpHyperParams],
    cfg: &GridSearchConfig,
) -> Result<GridSearchResult, DpgpError> {
    if grid.is_empty() {
        return Err(DpgpError::InvalidSettings("grid is empty".into()));
    }
    if cfg.trials == 0 {
        return Err(DpgpError::InvalidSettings("trials must be >= 1".into()));
    }
    cfg.sampler.validate()?;
    let splits = (0..cfg.trials)
        .map(|t| {
            let mut rng = derive_rng(cfg.seed, "grid-split", t as u64);
            make_holdout_split(data, cfg.fraction, &mut rng).map_err(|e| DpgpError::Holdout(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if splits.iter().any(|s| s.heldout.is_empty()) {
        return Err(DpgpError::Holdout("hold-out fraction selects no subjects".into()));
    }

    let table: Vec<GridRow> = with_pool(cfg.jobs, || {
        grid.par_iter()
            .map(|hyper| match score_point(&splits, hyper, cfg) {
                Ok(trial_rmse) => GridRow {
                    hyper: *hyper,
                    mean_rmse: trial_rmse.iter().sum::<f64>() / trial_rmse.len() as f64,
                    trial_rmse,
                    error: None,
                },
                Err(e) => {
                    log::warn!("grid point {hyper:?} failed: {e}");
                    GridRow {
                        hyper: *hyper,
                        mean_rmse: f64::INFINITY,
                        trial_rmse: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            })
            .collect()
    });
    let best_index =
        table.iter().enumerate().fold(0, |best, (i, r)| if r.mean_rmse < table[best].mean_rmse { i } else { best });
    Ok(GridSearchResult { best: table[best_index].hyper, best_index, table })
}
