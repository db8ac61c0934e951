use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::DpgpError;

pub type ClusterId = usize;

/// A partition of subjects into CRP tables.
///
/// Cluster ids are opaque; empty clusters are deleted as soon as they empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrpState {
    assignment: Vec<Option<ClusterId>>,
    cluster_sizes: BTreeMap<ClusterId, usize>,
    next_cluster_id: ClusterId,
}

impl CrpState {
    /// Every subject unassigned.
    pub fn empty(n: usize) -> Self {
        Self { assignment: vec![None; n], cluster_sizes: BTreeMap::new(), next_cluster_id: 0 }
    }

    pub fn single_cluster(n: usize) -> Self {
        Self::from_labels(&vec![0; n])
    }

    pub fn singletons(n: usize) -> Self {
        Self::from_labels(&(0..n).collect::<Vec<_>>())
    }

    /// Use `labels[i]` directly as the cluster id of subject `i`.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut sizes = BTreeMap::new();
        for &l in labels {
            *sizes.entry(l).or_insert(0) += 1;
        }
        Self {
            assignment: labels.iter().map(|&l| Some(l)).collect(),
            cluster_sizes: sizes,
            next_cluster_id: labels.iter().max().map_or(0, |m| m + 1),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_assigned(&self) -> usize {
        self.cluster_sizes.values().sum()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn cluster_of(&self, subject: usize) -> Option<ClusterId> {
        self.assignment[subject]
    }

    pub fn cluster_sizes(&self) -> &BTreeMap<ClusterId, usize> {
        &self.cluster_sizes
    }

    pub fn size(&self, cluster: ClusterId) -> usize {
        self.cluster_sizes.get(&cluster).copied().unwrap_or(0)
    }

    /// Take `subject` out of its cluster, deleting the cluster if it empties.
    pub fn unassign(&mut self, subject: usize) -> Option<ClusterId> {
        let k = self.assignment[subject].take()?;
        let size = self.cluster_sizes.get_mut(&k).expect("assigned cluster exists");
        *size -= 1;
        if *size == 0 {
            self.cluster_sizes.remove(&k);
        }
        Some(k)
    }

    /// Seat an unassigned `subject` at an existing cluster.
    pub fn assign(&mut self, subject: usize, cluster: ClusterId) -> Result<(), DpgpError> {
        if self.assignment[subject].is_some() {
            return Err(DpgpError::InvalidState(format!("subject {subject} is already assigned")));
        }
        let size = self
            .cluster_sizes
            .get_mut(&cluster)
            .ok_or_else(|| DpgpError::InvalidState(format!("cluster {cluster} does not exist")))?;
        *size += 1;
        self.assignment[subject] = Some(cluster);
        Ok(())
    }

    /// Seat an unassigned `subject` at a fresh cluster and return its id.
    pub fn assign_new(&mut self, subject: usize) -> Result<ClusterId, DpgpError> {
        if self.assignment[subject].is_some() {
            return Err(DpgpError::InvalidState(format!("subject {subject} is already assigned")));
        }
        let k = self.next_cluster_id;
        self.next_cluster_id += 1;
        self.cluster_sizes.insert(k, 1);
        self.assignment[subject] = Some(k);
        Ok(k)
    }

    /// Clusters in id order with their members in subject order.
    pub fn clusters(&self) -> BTreeMap<ClusterId, Vec<usize>> {
        let mut out: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
        for (i, a) in self.assignment.iter().enumerate() {
            if let Some(k) = a {
                out.entry(*k).or_default().push(i);
            }
        }
        out
    }

    /// Labels renumbered 0, 1, … in order of first appearance. Unassigned
    /// subjects get `usize::MAX`.
    pub fn canonical_labels(&self) -> Vec<usize> {
        let mut map = BTreeMap::new();
        self.assignment
            .iter()
            .map(|a| match a {
                Some(k) => {
                    let next = map.len();
                    *map.entry(*k).or_insert(next)
                }
                None => usize::MAX,
            })
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.assignment.iter().all(Option::is_some)
    }

    /// Sizes match the assignment, no cluster is empty, and every id is
    /// below `next_cluster_id`.
    pub fn check_consistency(&self) -> Result<(), DpgpError> {
        let mut counted: BTreeMap<ClusterId, usize> = BTreeMap::new();
        for k in self.assignment.iter().flatten() {
            *counted.entry(*k).or_insert(0) += 1;
        }
        if counted != self.cluster_sizes {
            return Err(DpgpError::InvalidState("cluster sizes disagree with assignment".into()));
        }
        if self.cluster_sizes.keys().any(|&k| k >= self.next_cluster_id) {
            return Err(DpgpError::InvalidState("cluster id beyond next_cluster_id".into()));
        }
        Ok(())
    }
}

/// Seating probabilities for one unassigned subject.
#[derive(Debug, Clone, PartialEq)]
pub struct CrpWeights {
    /// `size_k / (M + α)` per existing cluster, in id order.
    pub existing: Vec<(ClusterId, f64)>,
    /// `α / (M + α)`
    pub new_cluster: f64,
}

impl CrpWeights {
    pub fn total(&self) -> f64 {
        self.existing.iter().map(|(_, w)| w).sum::<f64>() + self.new_cluster
    }
}

pub fn crp_prior_weights(state: &CrpState, subject: usize, alpha: f64) -> Result<CrpWeights, DpgpError> {
    if subject >= state.n_subjects() {
        return Err(DpgpError::InvalidState(format!("subject {subject} out of range")));
    }
    if state.cluster_of(subject).is_some() {
        return Err(DpgpError::InvalidState(format!("subject {subject} must be unassigned")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(DpgpError::InvalidSettings(format!("alpha {alpha} must be finite and > 0")));
    }
    state.check_consistency()?;
    let m = state.n_assigned() as f64;
    let denom = m + alpha;
    Ok(CrpWeights {
        existing: state.cluster_sizes.iter().map(|(&k, &n)| (k, n as f64 / denom)).collect(),
        new_cluster: alpha / denom,
    })
}

/// Log probability of the partition under a CRP with concentration `alpha`:
/// `K log α + log Γ(α) − log Γ(α + N) + Σ log Γ(n_k)`.
pub fn crp_log_prior(state: &CrpState, alpha: f64) -> f64 {
    let n = state.n_assigned() as f64;
    let k = state.n_clusters() as f64;
    k * alpha.ln() + ln_gamma(alpha) - ln_gamma(alpha + n)
        + state.cluster_sizes.values().map(|&s| ln_gamma(s as f64)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_restaurant_opens_new_table() {
        let s = CrpState::empty(3);
        let w = crp_prior_weights(&s, 0, 0.7).unwrap();
        assert!(w.existing.is_empty());
        assert_eq!(w.new_cluster, 1.0);
    }

    #[test]
    fn direct_formula() {
        let mut s = CrpState::from_labels(&[0, 0, 0, 1, 1]);
        s.unassign(4);
        let w = crp_prior_weights(&s, 4, 1.0).unwrap();
        assert_eq!(w.existing, vec![(0, 0.6), (1, 0.2)]);
        assert!((w.new_cluster - 0.2).abs() < 1e-15);
        assert!((w.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assigned_subject_is_rejected() {
        let s = CrpState::single_cluster(2);
        assert!(matches!(crp_prior_weights(&s, 0, 1.0), Err(DpgpError::InvalidState(_))));
    }

    #[test]
    fn unassign_deletes_empty_cluster() {
        let mut s = CrpState::from_labels(&[0, 1, 1]);
        assert_eq!(s.unassign(0), Some(0));
        assert_eq!(s.n_clusters(), 1);
        let k = s.assign_new(0).unwrap();
        assert_eq!(k, 2);
        s.check_consistency().unwrap();
        assert_eq!(s.canonical_labels(), vec![0, 1, 1]);
    }

    #[test]
    fn monte_carlo_frequencies_match_weights() {
        let mut s = CrpState::from_labels(&[0, 0, 0, 1, 2, 2, 0]);
        s.unassign(6);
        let w = crp_prior_weights(&s, 6, 1.5).unwrap();
        let probs: Vec<f64> = w.existing.iter().map(|x| x.1).chain([w.new_cluster]).collect();
        let n = 100_000;
        let mut counts = vec![0usize; probs.len()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            counts[pick] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let f = *c as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 3.0 * se, "{f} vs {p}");
        }
    }

    #[test]
    fn log_prior_of_two_subjects() {
        let alpha: f64 = 0.5;
        let together = crp_log_prior(&CrpState::single_cluster(2), alpha).exp();
        let apart = crp_log_prior(&CrpState::singletons(2), alpha).exp();
        assert!((together - 1.0 / (1.0 + alpha)).abs() < 1e-12);
        assert!((apart - alpha / (1.0 + alpha)).abs() < 1e-12);
    }

    #[test]
    fn log_prior_sums_to_one_over_partitions_of_three() {
        let alpha = 2.3;
        let parts = [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [0, 1, 2]];
        let total: f64 = parts.iter().map(|p| crp_log_prior(&CrpState::from_labels(p), alpha).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
