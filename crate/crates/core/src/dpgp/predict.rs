use std::collections::HashMap;

use super::{DpgpError, DpgpPosterior};
use crate::data::TrajectoryDataset;
use crate::kernels::{FactoredCluster, QuerySubject, StackedCluster};

/// Posterior-averaged predictions for `(subject index, time)` queries.
///
/// For every retained sample the query subject's cluster is conditioned on
/// (all of its members' training observations) and the GP posterior mean is
/// taken; the final prediction is the mean over samples. Factorizations are
/// shared between samples that contain the same cluster.
pub fn dpgp_predict(
    post: &DpgpPosterior,
    data: &TrajectoryDataset,
    queries: &[(usize, f64)],
) -> Result<Vec<f64>, DpgpError> {
    if post.samples.is_empty() {
        return Err(DpgpError::InvalidState("posterior has no samples".into()));
    }
    for s in &post.samples {
        if s.n_subjects() != data.len() || !s.is_complete() {
            return Err(DpgpError::InvalidState("posterior samples do not cover the data".into()));
        }
    }
    if let Some(&(i, _)) = queries.iter().find(|(i, _)| *i >= data.len()) {
        return Err(DpgpError::InvalidState(format!("query subject {i} out of range")));
    }

    let mut cache: HashMap<Vec<usize>, FactoredCluster> = HashMap::new();
    let mut sums = vec![0.0; queries.len()];
    for state in &post.samples {
        let clusters = state.clusters();
        for (q, &(subject, time)) in queries.iter().enumerate() {
            let k = state.cluster_of(subject).expect("complete state");
            let members = &clusters[&k];
            let pos = members.binary_search(&subject).expect("subject is a member of its cluster");
            if !cache.contains_key(members) {
                let sc = StackedCluster::from_subjects(members.iter().map(|&i| data.subject(i)));
                cache.insert(members.clone(), FactoredCluster::new(sc, &post.hyper.cov)?);
            }
            let (mean, _) = cache[members].predict(time, QuerySubject::Existing(pos));
            sums[q] += mean;
        }
    }
    let n = post.samples.len() as f64;
    let out: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(DpgpError::NumericalFailure("non-finite prediction".into()));
    }
    Ok(out)
}
