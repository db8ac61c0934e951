use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, LcmmError, LcmmFit, SubjectCov};
use crate::data::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcmmPrediction {
    pub mean: f64,
    /// Class posteriors given the observed values.
    pub class_posteriors: Vec<f64>,
}

/// Predict a subject's value at `t` from its observed values.
///
/// Class posteriors are computed from the observations; within each class the
/// prediction is the class trend plus the conditional correction
/// `Σ_{*o} Σ_{oo}⁻¹ (y − X v_g)` from the within-subject process (zero for the
/// no-covariance family). The result is the posterior-weighted average.
pub fn lcmm_predict_detailed(fit: &LcmmFit, observed: &[Observation], t: f64) -> Result<LcmmPrediction, LcmmError> {
    fit.params.validate(&fit.spec)?;
    if !t.is_finite() {
        return Err(LcmmError::InvalidData(format!("query time {t} is not finite")));
    }
    let p = &fit.params;
    let g_count = fit.spec.n_classes;
    if observed.is_empty() {
        let mean = (0..g_count).map(|g| p.pi[g] * p.class_mean(g, t)).sum();
        return Ok(LcmmPrediction { mean, class_posteriors: p.pi.clone() });
    }
    let times: Vec<f64> = observed.iter().map(|o| o.time).collect();
    let cov = SubjectCov::new(&times, &p.within, p.sigma_eps2)?;
    let cross = DVector::from_iterator(times.len(), times.iter().map(|&s| p.within.cov(t, s)));

    let mut terms = Vec::with_capacity(g_count);
    let mut class_pred = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let resid = DVector::from_iterator(observed.len(), observed.iter().map(|o| o.value - p.class_mean(g, o.time)));
        terms.push(p.pi[g].ln() + cov.logpdf(&resid));
        let correction = if matches!(cov, SubjectCov::Iid(_)) { 0.0 } else { cross.dot(&cov.solve(&resid)) };
        class_pred.push(p.class_mean(g, t) + correction);
    }
    let lse = log_sum_exp(&terms);
    let class_posteriors: Vec<f64> = terms.iter().map(|x| (x - lse).exp()).collect();
    let mean = class_posteriors.iter().zip(&class_pred).map(|(w, m)| w * m).sum();
    Ok(LcmmPrediction { mean, class_posteriors })
}

pub fn lcmm_predict(fit: &LcmmFit, observed: &[Observation], t: f64) -> Result<f64, LcmmError> {
    lcmm_predict_detailed(fit, observed, t).map(|p| p.mean)
}
