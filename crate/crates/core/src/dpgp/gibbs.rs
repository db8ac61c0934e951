use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crp::{crp_log_prior, ClusterId, CrpState};
use super::{DpgpError, DpgpHyperParams};
use crate::data::TrajectoryDataset;
use crate::kernels::{log_marginal_likelihood, ClusterCovConfig, ClusterSummary, StackedCluster, StructuredModel};

/// Above this many distinct observation times the sampler scores clusters by
/// dense refactorization instead of grid sufficient statistics.
const MAX_GRID_FOR_SUMMARIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub sweeps: usize,
    pub burnin: usize,
    pub thin: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { sweeps: 500, burnin: 100, thin: 5 }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<(), DpgpError> {
        if self.sweeps <= self.burnin {
            return Err(DpgpError::InvalidSettings(format!(
                "sweeps ({}) must exceed burnin ({})",
                self.sweeps, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(DpgpError::InvalidSettings("thin must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the state after sweep `s` (1-based) is retained.
    fn retains(&self, s: usize) -> bool {
        s > self.burnin && (s - self.burnin - 1).is_multiple_of(self.thin)
    }
}

/// Scores sets of subjects by their cluster marginal likelihood.
trait ClusterScorer {
    type Summary: Clone;

    fn empty(&self) -> Self::Summary;
    fn add(&self, s: &mut Self::Summary, subject: usize);
    fn remove(&self, s: &mut Self::Summary, subject: usize);
    fn lml(&self, s: &Self::Summary) -> Result<f64, DpgpError>;
    fn lml_with(&self, s: &Self::Summary, subject: usize) -> Result<f64, DpgpError>;

    fn summary_of(&self, members: &[usize]) -> Self::Summary {
        let mut s = self.empty();
        for &i in members {
            self.add(&mut s, i);
        }
        s
    }
}

fn finite(x: f64) -> Result<f64, DpgpError> {
    if x.is_nan() {
        Err(DpgpError::NumericalFailure("cluster marginal likelihood is NaN".into()))
    } else {
        Ok(x)
    }
}

impl ClusterScorer for StructuredModel {
    type Summary = ClusterSummary;

    fn empty(&self) -> ClusterSummary {
        self.empty_summary()
    }
    fn add(&self, s: &mut ClusterSummary, subject: usize) {
        s.add(self.terms(subject));
    }
    fn remove(&self, s: &mut ClusterSummary, subject: usize) {
        s.remove(self.terms(subject));
    }
    fn lml(&self, s: &ClusterSummary) -> Result<f64, DpgpError> {
        finite(s.log_marginal_likelihood())
    }
    fn lml_with(&self, s: &ClusterSummary, subject: usize) -> Result<f64, DpgpError> {
        finite(s.log_marginal_likelihood_with(self.terms(subject)))
    }
}

/// Refactorizes the full cluster matrix for every score.
struct DenseScorer<'a> {
    data: &'a TrajectoryDataset,
    cov: ClusterCovConfig,
}

impl DenseScorer<'_> {
    fn score(&self, members: &[usize]) -> Result<f64, DpgpError> {
        let sc = StackedCluster::from_subjects(members.iter().map(|&i| self.data.subject(i)));
        finite(log_marginal_likelihood(&sc, &self.cov)?)
    }
}

impl ClusterScorer for DenseScorer<'_> {
    type Summary = Vec<usize>;

    fn empty(&self) -> Vec<usize> {
        Vec::new()
    }
    fn add(&self, s: &mut Vec<usize>, subject: usize) {
        let pos = s.binary_search(&subject).unwrap_or_else(|p| p);
        s.insert(pos, subject);
    }
    fn remove(&self, s: &mut Vec<usize>, subject: usize) {
        if let Ok(pos) = s.binary_search(&subject) {
            s.remove(pos);
        }
    }
    fn lml(&self, s: &Vec<usize>) -> Result<f64, DpgpError> {
        self.score(s)
    }
    fn lml_with(&self, s: &Vec<usize>, subject: usize) -> Result<f64, DpgpError> {
        let mut m = s.clone();
        self.add(&mut m, subject);
        self.score(&m)
    }
}

/// Draw an index with probability proportional to `exp(log_w)`.
fn sample_log_weights<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> Result<usize, DpgpError> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DpgpError::NumericalFailure("all candidate log-weights are -inf".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, wj) in w.iter().enumerate() {
        acc += wj;
        if u < acc {
            return Ok(j);
        }
    }
    // u landed on the rounding gap at the top
    Ok(w.iter().rposition(|&x| x > 0.0).unwrap_or(0))
}

struct Chain<'s, S: ClusterScorer> {
    scorer: &'s S,
    alpha: f64,
    singleton_lml: Vec<f64>,
    clusters: BTreeMap<ClusterId, (S::Summary, f64)>,
}

impl<'s, S: ClusterScorer> Chain<'s, S> {
    fn new(scorer: &'s S, alpha: f64, n: usize) -> Result<Self, DpgpError> {
        let empty = scorer.empty();
        let singleton_lml = (0..n).map(|i| scorer.lml_with(&empty, i)).collect::<Result<_, _>>()?;
        Ok(Self { scorer, alpha, singleton_lml, clusters: BTreeMap::new() })
    }

    fn rebuild(&mut self, state: &CrpState) -> Result<(), DpgpError> {
        self.clusters.clear();
        for (k, members) in state.clusters() {
            let s = self.scorer.summary_of(&members);
            let l = self.scorer.lml(&s)?;
            self.clusters.insert(k, (s, l));
        }
        Ok(())
    }

    fn sweep<R: Rng + ?Sized>(&mut self, state: &mut CrpState, rng: &mut R) -> Result<(), DpgpError> {
        self.rebuild(state)?;
        let ln_alpha = self.alpha.ln();
        let mut log_w = Vec::new();
        let mut with_lml = Vec::new();
        for i in 0..state.n_subjects() {
            let old = state.unassign(i).ok_or_else(|| DpgpError::InvalidState(format!("subject {i} unassigned")))?;
            if state.size(old) == 0 {
                self.clusters.remove(&old);
            } else {
                let entry = self.clusters.get_mut(&old).expect("cluster summary exists");
                self.scorer.remove(&mut entry.0, i);
                entry.1 = self.scorer.lml(&entry.0)?;
            }

            log_w.clear();
            with_lml.clear();
            for (&k, (summary, lml)) in &self.clusters {
                let joined = self.scorer.lml_with(summary, i)?;
                with_lml.push(joined);
                log_w.push((state.size(k) as f64).ln() + joined - lml);
            }
            log_w.push(ln_alpha + self.singleton_lml[i]);

            let pick = sample_log_weights(&log_w, rng)?;
            if pick < with_lml.len() {
                let (&k, entry) = self.clusters.iter_mut().nth(pick).expect("pick within clusters");
                state.assign(i, k)?;
                self.scorer.add(&mut entry.0, i);
                entry.1 = with_lml[pick];
            } else {
                let k = state.assign_new(i)?;
                let mut s = self.scorer.empty();
                self.scorer.add(&mut s, i);
                self.clusters.insert(k, (s, self.singleton_lml[i]));
            }
        }
        Ok(())
    }

    fn joint(&self, state: &CrpState) -> Result<f64, DpgpError> {
        let mut total = crp_log_prior(state, self.alpha);
        for members in state.clusters().values() {
            total += self.scorer.lml(&self.scorer.summary_of(members))?;
        }
        Ok(total)
    }
}

fn check_state(state: &CrpState, data: &TrajectoryDataset) -> Result<(), DpgpError> {
    if state.n_subjects() != data.len() {
        return Err(DpgpError::InvalidState(format!(
            "state covers {} subjects, data has {}",
            state.n_subjects(),
            data.len()
        )));
    }
    if !state.is_complete() {
        return Err(DpgpError::InvalidState("every subject must be assigned".into()));
    }
    state.check_consistency()
}

fn use_summaries(data: &TrajectoryDataset) -> bool {
    data.distinct_times().len() <= MAX_GRID_FOR_SUMMARIES
}

/// One collapsed Gibbs pass: each subject in turn is removed and reseated with
/// probability ∝ CRP weight × exp(Δ log marginal likelihood).
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &CrpState,
    data: &TrajectoryDataset,
    hyper: &DpgpHyperParams,
    rng: &mut R,
) -> Result<CrpState, DpgpError> {
    hyper.validate()?;
    check_state(state, data)?;
    let mut next = state.clone();
    if use_summaries(data) {
        let scorer = StructuredModel::new(data, &hyper.cov)?;
        Chain::new(&scorer, hyper.alpha, data.len())?.sweep(&mut next, rng)?;
    } else {
        let scorer = DenseScorer { data, cov: hyper.cov };
        Chain::new(&scorer, hyper.alpha, data.len())?.sweep(&mut next, rng)?;
    }
    Ok(next)
}

/// CRP log prior of the partition plus the sum of cluster marginal
/// log-likelihoods.
pub fn joint_log_likelihood(
    state: &CrpState,
    data: &TrajectoryDataset,
    hyper: &DpgpHyperParams,
) -> Result<f64, DpgpError> {
    check_state(state, data)?;
    let mut total = crp_log_prior(state, hyper.alpha);
    for members in state.clusters().values() {
        let sc = StackedCluster::from_subjects(members.iter().map(|&i| data.subject(i)));
        total += log_marginal_likelihood(&sc, &hyper.cov)?;
    }
    Ok(total)
}

/// Retained Gibbs states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpgpPosterior {
    pub samples: Vec<CrpState>,
    pub joint_log_liks: Vec<f64>,
    pub hyper: DpgpHyperParams,
    pub map_index: usize,
}

impl DpgpPosterior {
    pub fn map_state(&self) -> &CrpState {
        &self.samples[self.map_index]
    }

    pub fn summary(&self, data: &TrajectoryDataset) -> PosteriorSummary {
        let labels = self.map_state().canonical_labels();
        PosteriorSummary {
            hyper: self.hyper,
            map_index: self.map_index,
            map_partition: data
                .subjects()
                .iter()
                .zip(labels)
                .map(|(s, l)| SubjectCluster { subject_id: s.id().to_string(), cluster: l })
                .collect(),
            cluster_counts: self.samples.iter().map(CrpState::n_clusters).collect(),
            joint_log_liks: self.joint_log_liks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCluster {
    pub subject_id: String,
    pub cluster: usize,
}

/// JSON-facing view of a posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub hyper: DpgpHyperParams,
    pub map_index: usize,
    pub map_partition: Vec<SubjectCluster>,
    pub cluster_counts: Vec<usize>,
    pub joint_log_liks: Vec<f64>,
}

/// Run a chain from the one-cluster state and keep every `thin`-th state after
/// burn-in, starting with the first.
pub fn fit_dpgp<R: Rng + ?Sized>(
    data: &TrajectoryDataset,
    hyper: &DpgpHyperParams,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<DpgpPosterior, DpgpError> {
    hyper.validate()?;
    settings.validate()?;
    if use_summaries(data) {
        let scorer = StructuredModel::new(data, &hyper.cov)?;
        run_chain(&scorer, data.len(), hyper, settings, rng)
    } else {
        let scorer = DenseScorer { data, cov: hyper.cov };
        run_chain(&scorer, data.len(), hyper, settings, rng)
    }
}

fn run_chain<S: ClusterScorer, R: Rng + ?Sized>(
    scorer: &S,
    n: usize,
    hyper: &DpgpHyperParams,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<DpgpPosterior, DpgpError> {
    let mut chain = Chain::new(scorer, hyper.alpha, n)?;
    let mut state = CrpState::single_cluster(n);
    let mut samples = Vec::new();
    let mut joint_log_liks = Vec::new();
    for s in 1..=settings.sweeps {
        chain.sweep(&mut state, rng)?;
        if settings.retains(s) {
            let j = chain.joint(&state)?;
            if !j.is_finite() {
                return Err(DpgpError::NumericalFailure(format!("joint log-likelihood {j} at sweep {s}")));
            }
            samples.push(state.clone());
            joint_log_liks.push(j);
        }
    }
    let map_index =
        joint_log_liks.iter().enumerate().fold(0, |best, (i, &j)| if j > joint_log_liks[best] { i } else { best });
    Ok(DpgpPosterior { samples, joint_log_liks, hyper: *hyper, map_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, Subject};
    use crate::seed::rng_from_seed;

    fn small_data() -> TrajectoryDataset {
        let subs = vec![
            Subject::new("a", vec![Observation::new(1.5, 1.0), Observation::new(2.0, 1.1)]).unwrap(),
            Subject::new("b", vec![Observation::new(1.5, -1.0), Observation::new(4.0, -1.2)]).unwrap(),
            Subject::new("c", vec![Observation::new(2.0, 0.9)]).unwrap(),
        ];
        TrajectoryDataset::new(subs).unwrap()
    }

    #[test]
    fn retention_counts() {
        let s = SamplerSettings { sweeps: 11, burnin: 10, thin: 1 };
        assert_eq!((1..=11).filter(|&i| s.retains(i)).count(), 1);
        let d = SamplerSettings::default();
        assert_eq!((1..=d.sweeps).filter(|&i| d.retains(i)).count(), 80);
        assert!(SamplerSettings { sweeps: 5, burnin: 5, thin: 1 }.validate().is_err());
        assert!(SamplerSettings { sweeps: 6, burnin: 5, thin: 0 }.validate().is_err());
    }

    #[test]
    fn sampler_ignores_zero_weights() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let j = sample_log_weights(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY], &mut rng).unwrap();
            assert_eq!(j, 1);
        }
        assert!(sample_log_weights(&[f64::NEG_INFINITY; 2], &mut rng).is_err());
    }

    #[test]
    fn dense_and_summary_chains_agree() {
        let data = small_data();
        let hyper = DpgpHyperParams::default();
        let settings = SamplerSettings { sweeps: 30, burnin: 5, thin: 2 };
        let fast = StructuredModel::new(&data, &hyper.cov).unwrap();
        let dense = DenseScorer { data: &data, cov: hyper.cov };
        let a = run_chain(&fast, 3, &hyper, &settings, &mut rng_from_seed(4)).unwrap();
        let b = run_chain(&dense, 3, &hyper, &settings, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a.samples, b.samples);
        for (x, y) in a.joint_log_liks.iter().zip(&b.joint_log_liks) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn joint_matches_public_dense_route() {
        let data = small_data();
        let hyper = DpgpHyperParams::default();
        let post = fit_dpgp(&data, &hyper, &SamplerSettings { sweeps: 10, burnin: 0, thin: 1 }, &mut rng_from_seed(2))
            .unwrap();
        for (s, j) in post.samples.iter().zip(&post.joint_log_liks) {
            let dense = joint_log_likelihood(s, &data, &hyper).unwrap();
            assert!((dense - j).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_mismatched_state() {
        let data = small_data();
        let err = gibbs_sweep(&CrpState::single_cluster(2), &data, &DpgpHyperParams::default(), &mut rng_from_seed(0));
        assert!(matches!(err, Err(DpgpError::InvalidState(_))));
    }
}
