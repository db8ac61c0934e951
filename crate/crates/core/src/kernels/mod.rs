//! Covariance functions and Gaussian-process algebra for one cluster.
//!
//! A cluster of `N_k` subjects shares a latent trend `f ~ GP(0, k_f)` and each
//! subject adds its own deviation `GP(0, k_n)`. Marginalizing the trend gives
//! the compound covariance
//!
//! ```text
//! k̃(t, t', n, n') = k_f(t, t') + k_n(t, t')   if n = n'
//!                  = k_f(t, t')               otherwise
//! ```
//!
//! and the stacked observations `ŷ` of the cluster are `N(0, K̂)`, where `K̂`
//! is `k̃` over all entries plus `(nugget + jitter)·I`.

mod structured;

pub use structured::{ClusterSummary, StructuredModel, SubjectTerms, TimeGrid};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Subject;
use crate::linalg::{cholesky_with_jitter, Factor, DEFAULT_JITTER, LN_2PI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel parameter: {0}")]
    InvalidParams(String),
    #[error("invalid stacked cluster: {0}")]
    InvalidCluster(String),
    #[error("covariance matrix of dimension {dim} is not positive definite even with jitter up to 1e-4")]
    NotPositiveDefinite { dim: usize },
}

/// Squared-exponential kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// σ², in squared value units.
    pub variance: f64,
    /// ℓ, in years.
    pub lengthscale: f64,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self, KernelError> {
        let p = Self { variance, lengthscale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !self.variance.is_finite() || self.variance < 0.0 {
            return Err(KernelError::InvalidParams(format!("variance {} must be finite and >= 0", self.variance)));
        }
        if !self.lengthscale.is_finite() || self.lengthscale <= 0.0 {
            return Err(KernelError::InvalidParams(format!("lengthscale {} must be finite and > 0", self.lengthscale)));
        }
        Ok(())
    }
}

/// `σ² exp(−(t − t')² / 2ℓ²)`
#[inline]
pub fn se_kernel(t: f64, t2: f64, p: &KernelParams) -> f64 {
    let d = (t - t2) / p.lengthscale;
    p.variance * (-0.5 * d * d).exp()
}

/// Kernel pair for one cluster plus the diagonal terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterCovConfig {
    /// Shared latent trend, `k_f`.
    pub latent: KernelParams,
    /// Per-subject deviation, `k_n`.
    pub individual: KernelParams,
    /// Observation-noise variance, on the exact diagonal only.
    pub nugget: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl ClusterCovConfig {
    pub fn new(latent: KernelParams, individual: KernelParams, nugget: f64) -> Self {
        Self { latent, individual, nugget, jitter: DEFAULT_JITTER }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        self.latent.validate()?;
        self.individual.validate()?;
        if !self.nugget.is_finite() || self.nugget < 0.0 {
            return Err(KernelError::InvalidParams(format!("nugget {} must be finite and >= 0", self.nugget)));
        }
        if !self.jitter.is_finite() || self.jitter < 0.0 {
            return Err(KernelError::InvalidParams(format!("jitter {} must be finite and >= 0", self.jitter)));
        }
        Ok(())
    }

    /// Prior variance of a single fresh observation.
    pub fn marginal_variance(&self) -> f64 {
        self.latent.variance + self.individual.variance + self.nugget
    }
}

/// The compound covariance `k̃`. Diagonal noise terms are not included.
#[inline]
pub fn compound_covariance(t: f64, t2: f64, n: usize, n2: usize, cfg: &ClusterCovConfig) -> f64 {
    let shared = se_kernel(t, t2, &cfg.latent);
    if n == n2 {
        shared + se_kernel(t, t2, &cfg.individual)
    } else {
        shared
    }
}

/// Observations of one cluster stacked into `ŷ`, `t̂` with the owning
/// subject of each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedCluster {
    y_hat: Vec<f64>,
    t_hat: Vec<f64>,
    owner: Vec<usize>,
    n_subjects: usize,
}

impl StackedCluster {
    /// Stack subjects in the given order; subject `i` of the iterator owns the
    /// `i`-th contiguous block.
    pub fn from_subjects<'a>(subjects: impl IntoIterator<Item = &'a Subject>) -> Self {
        let mut sc = Self { y_hat: Vec::new(), t_hat: Vec::new(), owner: Vec::new(), n_subjects: 0 };
        for (i, s) in subjects.into_iter().enumerate() {
            for o in s.observations() {
                sc.y_hat.push(o.value);
                sc.t_hat.push(o.time);
                sc.owner.push(i);
            }
            sc.n_subjects = i + 1;
        }
        sc
    }

    /// Build from raw vectors. Owners must cover `0..n_subjects` with every
    /// subject owning at least one entry; entries may be in any order.
    pub fn from_parts(y_hat: Vec<f64>, t_hat: Vec<f64>, owner: Vec<usize>) -> Result<Self, KernelError> {
        if y_hat.len() != t_hat.len() || y_hat.len() != owner.len() {
            return Err(KernelError::InvalidCluster("y_hat, t_hat and owner differ in length".into()));
        }
        let n_subjects = owner.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_subjects];
        for &o in &owner {
            seen[o] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(KernelError::InvalidCluster("owner indices are not 0..n_subjects".into()));
        }
        if y_hat.iter().chain(&t_hat).any(|x| !x.is_finite()) {
            return Err(KernelError::InvalidCluster("non-finite entry".into()));
        }
        Ok(Self { y_hat, t_hat, owner, n_subjects })
    }

    pub fn y_hat(&self) -> &[f64] {
        &self.y_hat
    }

    pub fn t_hat(&self) -> &[f64] {
        &self.t_hat
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat.is_empty()
    }

    /// Reorder entries; `perm[i]` is the source index of new entry `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            y_hat: perm.iter().map(|&p| self.y_hat[p]).collect(),
            t_hat: perm.iter().map(|&p| self.t_hat[p]).collect(),
            owner: perm.iter().map(|&p| self.owner[p]).collect(),
            n_subjects: self.n_subjects,
        }
    }
}

/// `K̂` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    matrix: DMatrix<f64>,
    factor: Factor,
}

impl CovMatrix {
    /// The factored matrix, including whatever jitter was needed.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Jitter actually placed on the diagonal.
    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }
}

/// Compound covariance over all stacked entries plus `nugget` on the diagonal,
/// before jitter.
pub(crate) fn raw_cluster_cov(sc: &StackedCluster, cfg: &ClusterCovConfig) -> DMatrix<f64> {
    let d = sc.len();
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let v = compound_covariance(sc.t_hat[i], sc.t_hat[j], sc.owner[i], sc.owner[j], cfg);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += cfg.nugget;
    }
    k
}

/// Assemble and factor `K̂`. Jitter starts at `cfg.jitter` and escalates ×10
/// up to 1e-4 before giving up.
pub fn assemble_cluster_cov(sc: &StackedCluster, cfg: &ClusterCovConfig) -> Result<CovMatrix, KernelError> {
    cfg.validate()?;
    let raw = raw_cluster_cov(sc, cfg);
    let (factor, matrix) =
        cholesky_with_jitter(&raw, cfg.jitter).ok_or(KernelError::NotPositiveDefinite { dim: sc.len() })?;
    Ok(CovMatrix { matrix, factor })
}

/// `log N(ŷ | 0, K̂)` via Cholesky.
pub fn log_marginal_likelihood(sc: &StackedCluster, cfg: &ClusterCovConfig) -> Result<f64, KernelError> {
    if sc.is_empty() {
        return Ok(0.0);
    }
    let cov = assemble_cluster_cov(sc, cfg)?;
    let y = DVector::from_column_slice(&sc.y_hat);
    Ok(cov.factor.gaussian_logpdf(&y))
}

/// Who a prediction is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySubject {
    /// A subject already in the cluster, by its owner index.
    Existing(usize),
    /// A subject with no observations in the cluster.
    New,
}

impl QuerySubject {
    fn matches(self, owner: usize) -> bool {
        matches!(self, QuerySubject::Existing(o) if o == owner)
    }
}

/// A cluster with `K̂` factored and `K̂⁻¹ŷ` precomputed, for repeated
/// predictions.
#[derive(Debug, Clone)]
pub struct FactoredCluster {
    cluster: StackedCluster,
    cfg: ClusterCovConfig,
    cov: CovMatrix,
    weights: DVector<f64>,
}

impl FactoredCluster {
    pub fn new(cluster: StackedCluster, cfg: &ClusterCovConfig) -> Result<Self, KernelError> {
        if cluster.is_empty() {
            return Err(KernelError::InvalidCluster("cannot condition on an empty cluster".into()));
        }
        let cov = assemble_cluster_cov(&cluster, cfg)?;
        let weights = cov.factor.solve(&DVector::from_column_slice(&cluster.y_hat));
        Ok(Self { cluster, cfg: *cfg, cov, weights })
    }

    fn cross_cov(&self, query_time: f64, query: QuerySubject) -> DVector<f64> {
        let sc = &self.cluster;
        DVector::from_fn(sc.len(), |i, _| {
            let shared = se_kernel(query_time, sc.t_hat[i], &self.cfg.latent);
            if query.matches(sc.owner[i]) {
                shared + se_kernel(query_time, sc.t_hat[i], &self.cfg.individual)
            } else {
                shared
            }
        })
    }

    /// Posterior mean and variance of a noisy observation of `query` at
    /// `query_time`. Variance is clamped at 0.
    pub fn predict(&self, query_time: f64, query: QuerySubject) -> (f64, f64) {
        let kq = self.cross_cov(query_time, query);
        let mean = kq.dot(&self.weights);
        let prior = self.cfg.latent.variance + self.cfg.individual.variance + self.cfg.nugget;
        let v = self.cov.factor.whiten(&kq);
        (mean, (prior - v.norm_squared()).max(0.0))
    }

    pub fn cluster(&self) -> &StackedCluster {
        &self.cluster
    }
}

/// Condition the cluster GP on `train` and predict at one (time, subject).
pub fn gp_posterior_predict(
    train: &StackedCluster,
    cfg: &ClusterCovConfig,
    query_time: f64,
    query_subject: QuerySubject,
) -> Result<(f64, f64), KernelError> {
    Ok(FactoredCluster::new(train.clone(), cfg)?.predict(query_time, query_subject))
}

/// Dense Gaussian log-density constant, exposed for cross-checks.
pub fn gaussian_log_norm_const(dim: usize) -> f64 {
    -0.5 * dim as f64 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use rand::{Rng, SeedableRng};

    fn cfg(fv: f64, fl: f64, nv: f64, nl: f64, nugget: f64) -> ClusterCovConfig {
        ClusterCovConfig::new(KernelParams::new(fv, fl).unwrap(), KernelParams::new(nv, nl).unwrap(), nugget)
    }

    fn subject(id: &str, pts: &[(f64, f64)]) -> Subject {
        Subject::new(id, pts.iter().map(|&(t, v)| Observation::new(t, v)).collect()).unwrap()
    }

    #[test]
    fn se_kernel_values() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        assert_eq!(se_kernel(2.0, 2.0, &p), 1.0);
        assert!((se_kernel(1.0, 2.0, &p) - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert_eq!(se_kernel(1.0, 2.0, &p), se_kernel(2.0, 1.0, &p));
        assert!(se_kernel(0.0, 100.0, &p) < 1e-300);
    }

    #[test]
    fn kernel_params_validation() {
        assert!(KernelParams::new(-1.0, 1.0).is_err());
        assert!(KernelParams::new(1.0, 0.0).is_err());
        assert!(KernelParams::new(f64::NAN, 1.0).is_err());
        assert!(KernelParams::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn compound_branches() {
        let c = cfg(1.0, 1.0, 0.5, 1.0, 0.0);
        assert_eq!(compound_covariance(2.0, 2.0, 0, 1, &c), 1.0);
        assert_eq!(compound_covariance(2.0, 2.0, 3, 3, &c), 1.5);
    }

    #[test]
    fn compound_matrix_matches_branch_double_loop() {
        let c = cfg(1.3, 0.9, 0.4, 2.1, 0.0);
        let subs = [subject("a", &[(1.5, 0.0), (2.0, 0.0)]), subject("b", &[(1.5, 0.0), (4.0, 0.0)])];
        let sc = StackedCluster::from_subjects(&subs);
        let k = raw_cluster_cov(&sc, &c);
        let entries = [(1.5, 0), (2.0, 0), (1.5, 1), (4.0, 1)];
        for (i, &(ti, ni)) in entries.iter().enumerate() {
            for (j, &(tj, nj)) in entries.iter().enumerate() {
                let mut want = se_kernel(ti, tj, &c.latent);
                if ni == nj {
                    want += se_kernel(ti, tj, &c.individual);
                }
                assert!((k[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_entry_matrix() {
        let c = cfg(1.0, 1.0, 0.5, 1.0, 0.1);
        let sc = StackedCluster::from_subjects(&[subject("a", &[(2.0, 0.3)])]);
        let k = assemble_cluster_cov(&sc, &c).unwrap();
        assert!((k.matrix()[(0, 0)] - (1.0 + 0.5 + 0.1 + 1e-8)).abs() < 1e-15);
        assert_eq!(k.jitter(), 1e-8);
    }

    #[test]
    fn one_dimensional_likelihoods() {
        let c = ClusterCovConfig { jitter: 0.0, ..cfg(1.0, 1.0, 0.0, 1.0, 0.0) };
        let at = |y: f64| {
            let sc = StackedCluster::from_parts(vec![y], vec![1.0], vec![0]).unwrap();
            log_marginal_likelihood(&sc, &c).unwrap()
        };
        assert!((at(0.0) + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!((at(1.0) + 1.418_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn zero_covariance_escalates_jitter() {
        // latent variance 0 leaves only the rank-deficient individual block
        let c = ClusterCovConfig { jitter: 0.0, ..cfg(0.0, 1.0, 1.0, 1e9, 0.0) };
        let sc = StackedCluster::from_subjects(&[subject("a", &[(1.0, 0.0), (2.0, 0.0)])]);
        let k = assemble_cluster_cov(&sc, &c).unwrap();
        assert!(k.jitter() >= 1e-8);
    }

    #[test]
    fn five_dimensional_likelihood_matches_explicit_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let c = cfg(0.8, 1.7, 0.3, 0.9, 0.05);
        let y: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let sc = StackedCluster::from_parts(y.clone(), vec![1.5, 2.0, 4.0, 1.5, 5.0], vec![0, 0, 0, 1, 1]).unwrap();
        let k = raw_cluster_cov(&sc, &c) + DMatrix::identity(5, 5) * c.jitter;
        let inv = k.clone().try_inverse().unwrap();
        let yv = DVector::from_vec(y);
        let want =
            -0.5 * (yv.transpose() * inv * &yv)[(0, 0)] - 0.5 * k.determinant().ln() + gaussian_log_norm_const(5);
        let got = log_marginal_likelihood(&sc, &c).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn noiseless_interpolation() {
        let c = ClusterCovConfig { jitter: 1e-12, ..cfg(1.0, 1.5, 0.3, 1.0, 0.0) };
        let sc = StackedCluster::from_subjects(&[
            subject("a", &[(1.5, 0.4), (2.0, 0.1), (4.0, -0.3)]),
            subject("b", &[(1.5, 1.0), (5.0, 0.2)]),
        ]);
        let (m, v) = gp_posterior_predict(&sc, &c, 2.0, QuerySubject::Existing(0)).unwrap();
        assert!((m - 0.1).abs() < 1e-6, "{m}");
        assert!(v <= 1e-6);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let c = cfg(1.0, 1.0, 0.5, 1.0, 0.1);
        let sc = StackedCluster::from_subjects(&[subject("a", &[(1.5, 0.4), (2.0, 0.1)])]);
        let (m, v) = gp_posterior_predict(&sc, &c, 102.0, QuerySubject::New).unwrap();
        assert!(m.abs() < 1e-6);
        assert!((v - 1.6).abs() < 1e-6);
    }

    #[test]
    fn two_point_conditional_matches_closed_form() {
        let c = cfg(1.2, 2.0, 0.4, 1.0, 0.2);
        let sc = StackedCluster::from_parts(vec![0.7, -0.2], vec![1.5, 4.0], vec![0, 1]).unwrap();
        let (m, v) = gp_posterior_predict(&sc, &c, 2.0, QuerySubject::Existing(0)).unwrap();
        // hand-built 2×2 conditional Gaussian
        let kf = |a: f64, b: f64| 1.2 * (-(a - b) * (a - b) / 8.0).exp();
        let kn = |a: f64, b: f64| 0.4 * (-(a - b) * (a - b) / 2.0).exp();
        let d = 0.2 + 1e-8;
        let (a, b, cc) = (kf(1.5, 1.5) + kn(1.5, 1.5) + d, kf(1.5, 4.0), kf(4.0, 4.0) + kn(4.0, 4.0) + d);
        let det = a * cc - b * b;
        let (i11, i12, i22) = (cc / det, -b / det, a / det);
        let k1 = kf(2.0, 1.5) + kn(2.0, 1.5);
        let k2 = kf(2.0, 4.0);
        let mean = k1 * (i11 * 0.7 + i12 * -0.2) + k2 * (i12 * 0.7 + i22 * -0.2);
        let var = 1.2 + 0.4 + 0.2 - (k1 * (i11 * k1 + i12 * k2) + k2 * (i12 * k1 + i22 * k2));
        assert!((m - mean).abs() < 1e-10);
        assert!((v - var).abs() < 1e-10);
    }

    #[test]
    fn from_parts_rejects_bad_owners() {
        assert!(StackedCluster::from_parts(vec![0.0, 1.0], vec![1.0, 2.0], vec![0, 2]).is_err());
        assert!(StackedCluster::from_parts(vec![0.0], vec![1.0, 2.0], vec![0, 0]).is_err());
    }
}
