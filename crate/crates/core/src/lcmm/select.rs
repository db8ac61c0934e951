use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{em_fit, CovKind, EmSettings, LcmmError, LcmmFit, LcmmSpec};
use crate::data::TrajectoryDataset;
use crate::eval::with_pool;
use crate::seed::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub spec: LcmmSpec,
    pub label: String,
    /// `+inf` for a failed fit.
    pub bic: f64,
    pub loglik: f64,
    pub n_params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelection {
    pub table: Vec<SelectionRow>,
    /// Successful fits, in candidate order.
    pub fits: Vec<LcmmFit>,
    /// Index into `table` of the lowest-BIC model of each family.
    pub per_family_best: BTreeMap<CovKind, usize>,
    pub global_best: usize,
}

impl ModelSelection {
    pub fn best_fit(&self) -> &LcmmFit {
        self.fit_for(self.global_best).expect("best row has a fit")
    }

    pub fn fit_for(&self, row: usize) -> Option<&LcmmFit> {
        let spec = self.table.get(row)?.spec;
        self.fits.iter().find(|f| f.spec == spec)
    }
}

/// Fit every candidate and rank by BIC (lower is better, first wins ties).
/// Each candidate draws from its own stream so results do not depend on
/// `jobs` or on the order of `candidates`.
pub fn select_model(
    data: &TrajectoryDataset,
    candidates: &[LcmmSpec],
    settings: &EmSettings,
    seed: u64,
    jobs: usize,
) -> Result<ModelSelection, LcmmError> {
    if candidates.is_empty() {
        return Err(LcmmError::InvalidParams("no candidate models".into()));
    }
    let results: Vec<Result<LcmmFit, LcmmError>> = with_pool(jobs, || {
        candidates
            .par_iter()
            .map(|spec| {
                let label = format!("lcmm-{}", spec.cov_kind).to_lowercase();
                let mut rng = derive_rng(seed, &label, spec.n_classes as u64);
                em_fit(data, spec, settings, &mut rng)
            })
            .collect()
    });

    let mut table = Vec::with_capacity(candidates.len());
    let mut fits = Vec::new();
    for (spec, r) in candidates.iter().zip(results) {
        match r {
            Ok(fit) => {
                table.push(SelectionRow {
                    spec: *spec,
                    label: spec.label(),
                    bic: fit.bic,
                    loglik: fit.loglik,
                    n_params: fit.n_params,
                    error: None,
                });
                fits.push(fit);
            }
            Err(e) => {
                log::warn!("{} failed: {e}", spec.label());
                table.push(SelectionRow {
                    spec: *spec,
                    label: spec.label(),
                    bic: f64::INFINITY,
                    loglik: f64::NEG_INFINITY,
                    n_params: spec.n_params(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if fits.is_empty() {
        return Err(LcmmError::InvalidData("every candidate model failed to fit".into()));
    }

    let argmin = |rows: &mut dyn Iterator<Item = usize>| {
        rows.filter(|&i| table[i].error.is_none()).fold(None, |best: Option<usize>, i| match best {
            Some(b) if table[b].bic <= table[i].bic => Some(b),
            _ => Some(i),
        })
    };
    let global_best = argmin(&mut (0..table.len())).expect("at least one fit");
    let mut per_family_best = BTreeMap::new();
    for kind in CovKind::ALL {
        if let Some(i) = argmin(&mut (0..table.len()).filter(|&i| table[i].spec.cov_kind == kind)) {
            per_family_best.insert(kind, i);
        }
    }
    Ok(ModelSelection { table, fits, per_family_best, global_best })
}

/// Every `(family, G)` with `G` in `1..=max_classes`.
pub fn candidate_grid(kinds: &[CovKind], max_classes: usize) -> Vec<LcmmSpec> {
    kinds.iter().flat_map(|&k| (1..=max_classes).map(move |g| LcmmSpec::new(g, k))).collect()
}
