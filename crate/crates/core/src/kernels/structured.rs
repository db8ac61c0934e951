//! Cluster marginal likelihood through per-subject sufficient statistics.
//!
//! When all observation times come from a small grid `u` of `m` ages, the
//! latent part of `K̂` is `P K_uu Pᵀ = (PA)(PA)ᵀ` with `K_uu = AAᵀ` and `P` a
//! row selection, while the rest is block diagonal `D = blockdiag(D_n)`,
//! `D_n = K_n(t_n) + (nugget + jitter)·I`. By the matrix determinant lemma
//! and Woodbury,
//!
//! ```text
//! log|K̂|    = Σ log|D_n| + log|M|,        M = I + Σ Aᵀ P_nᵀ D_n⁻¹ P_n A
//! ŷᵀK̂⁻¹ŷ   = Σ y_nᵀ D_n⁻¹ y_n − bᵀ M⁻¹ b,  b = Σ Aᵀ P_nᵀ D_n⁻¹ y_n
//! ```
//!
//! so a cluster is summarized by sums of per-subject terms, and moving one
//! subject between clusters costs one `m × m` factorization instead of a
//! refactorization of the whole cluster.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::{se_kernel, ClusterCovConfig, KernelError};
use crate::data::TrajectoryDataset;
use crate::linalg::{cholesky_with_jitter, LN_2PI};

/// Sorted distinct observation times of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn from_dataset(data: &TrajectoryDataset) -> Self {
        Self { times: data.distinct_times() }
    }

    pub fn index(&self, t: f64) -> Option<usize> {
        self.times.binary_search_by(|u| u.total_cmp(&t)).ok()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// One subject's contribution to a [`ClusterSummary`].
#[derive(Debug, Clone)]
pub struct SubjectTerms {
    /// `Aᵀ P_nᵀ D_n⁻¹ P_n A`
    s: DMatrix<f64>,
    /// `Aᵀ P_nᵀ D_n⁻¹ y_n`
    b: DVector<f64>,
    /// `y_nᵀ D_n⁻¹ y_n`
    c: f64,
    log_det_d: f64,
    n_obs: usize,
}

/// Sufficient statistics of a set of subjects under shared hyperparameters.
#[derive(Debug, Clone)]
pub struct ClusterSummary {
    s: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    log_det_d: f64,
    n_obs: usize,
    n_subjects: usize,
}

impl ClusterSummary {
    fn empty(m: usize) -> Self {
        Self { s: DMatrix::zeros(m, m), b: DVector::zeros(m), c: 0.0, log_det_d: 0.0, n_obs: 0, n_subjects: 0 }
    }

    pub fn add(&mut self, t: &SubjectTerms) {
        self.s += &t.s;
        self.b += &t.b;
        self.c += t.c;
        self.log_det_d += t.log_det_d;
        self.n_obs += t.n_obs;
        self.n_subjects += 1;
    }

    pub fn remove(&mut self, t: &SubjectTerms) {
        self.s -= &t.s;
        self.b -= &t.b;
        self.c -= t.c;
        self.log_det_d -= t.log_det_d;
        self.n_obs -= t.n_obs;
        self.n_subjects -= 1;
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    fn evaluate(s: DMatrix<f64>, b: &DVector<f64>, c: f64, log_det_d: f64, n_obs: usize) -> f64 {
        if n_obs == 0 {
            return 0.0;
        }
        let mut m = s;
        for i in 0..m.nrows() {
            m[(i, i)] += 1.0;
        }
        // M ⪰ I, so this cannot fail short of non-finite input
        let chol = match Cholesky::new(m) {
            Some(c) => c,
            None => return f64::NAN,
        };
        let l = chol.l_dirty();
        let log_det_m = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        let z = l.solve_lower_triangular(b).expect("positive diagonal");
        let quad = c - z.norm_squared();
        -0.5 * quad - 0.5 * (log_det_d + log_det_m) - 0.5 * n_obs as f64 * LN_2PI
    }

    /// `log N(ŷ | 0, K̂)` of the summarized subjects.
    pub fn log_marginal_likelihood(&self) -> f64 {
        Self::evaluate(self.s.clone(), &self.b, self.c, self.log_det_d, self.n_obs)
    }

    /// Marginal likelihood of the summarized subjects plus one more, without
    /// modifying `self`.
    pub fn log_marginal_likelihood_with(&self, t: &SubjectTerms) -> f64 {
        Self::evaluate(
            &self.s + &t.s,
            &(&self.b + &t.b),
            self.c + t.c,
            self.log_det_d + t.log_det_d,
            self.n_obs + t.n_obs,
        )
    }
}

/// Per-subject terms for a whole dataset under one [`ClusterCovConfig`].
#[derive(Debug, Clone)]
pub struct StructuredModel {
    grid: TimeGrid,
    terms: Vec<SubjectTerms>,
}

impl StructuredModel {
    pub fn new(data: &TrajectoryDataset, cfg: &ClusterCovConfig) -> Result<Self, KernelError> {
        cfg.validate()?;
        let grid = TimeGrid::from_dataset(data);
        let m = grid.len();
        let kuu = DMatrix::from_fn(m, m, |i, j| se_kernel(grid.times[i], grid.times[j], &cfg.latent));
        let eig = SymmetricEigen::new(kuu);
        let mut basis = eig.eigenvectors;
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            let scale = lambda.max(0.0).sqrt();
            basis.column_mut(j).scale_mut(scale);
        }

        let mut terms = Vec::with_capacity(data.len());
        for s in data.subjects() {
            let obs = s.observations();
            let n = obs.len();
            let mut d = DMatrix::from_fn(n, n, |i, j| se_kernel(obs[i].time, obs[j].time, &cfg.individual));
            for i in 0..n {
                d[(i, i)] += cfg.nugget;
            }
            let (factor, _) =
                cholesky_with_jitter(&d, cfg.jitter).ok_or(KernelError::NotPositiveDefinite { dim: n })?;
            let rows: Vec<usize> = obs.iter().map(|o| grid.index(o.time).expect("time is on grid")).collect();
            let a_n = DMatrix::from_fn(n, m, |i, j| basis[(rows[i], j)]);
            let y = DVector::from_iterator(n, s.values());
            let wa = factor.whiten_mat(&a_n);
            let wy = factor.whiten(&y);
            terms.push(SubjectTerms {
                s: wa.transpose() * &wa,
                b: wa.transpose() * &wy,
                c: wy.norm_squared(),
                log_det_d: factor.log_det(),
                n_obs: n,
            });
        }
        Ok(Self { grid, terms })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn terms(&self, subject: usize) -> &SubjectTerms {
        &self.terms[subject]
    }

    pub fn empty_summary(&self) -> ClusterSummary {
        ClusterSummary::empty(self.grid.len())
    }

    pub fn summary_of(&self, members: &[usize]) -> ClusterSummary {
        let mut s = self.empty_summary();
        for &i in members {
            s.add(&self.terms[i]);
        }
        s
    }
}
