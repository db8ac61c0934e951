//! Synthetic cohorts shaped like a small four-wave developmental study.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Observation, Subject, TrajectoryDataset};
use crate::kernels::{se_kernel, KernelParams};
use crate::linalg::cholesky_with_jitter;
use crate::seed::rng_from_seed;

/// Smooth per-subject deviation, a squared-exponential GP draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wiggle {
    /// Standard deviation of the deviation (kernel variance is its square).
    pub amplitude: f64,
    /// Years.
    pub lengthscale: f64,
}

impl Wiggle {
    pub fn kernel(&self) -> KernelParams {
        KernelParams { variance: self.amplitude * self.amplitude, lengthscale: self.lengthscale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_subjects: usize,
    pub schedule: Vec<f64>,
    pub n_clusters: usize,
    /// Polynomial coefficients in age, lowest order first.
    pub cluster_mean_functions: Vec<Vec<f64>>,
    pub cluster_weights: Vec<f64>,
    pub individual_noise_sd: f64,
    pub individual_wiggle: Wiggle,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_subjects: 95,
            schedule: vec![1.5, 2.0, 4.0, 5.0],
            n_clusters: 3,
            cluster_mean_functions: default_mean_functions(3),
            cluster_weights: vec![0.4, 0.35, 0.25],
            individual_noise_sd: 0.25,
            individual_wiggle: Wiggle { amplitude: 0.3, lengthscale: 1.5 },
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

/// Linear mean curves `a_k + b_k (t − 3)` with levels spread evenly over
/// [1.4, −1.4] and slopes over [−0.1, 0.1], returned as polynomial coefficients.
pub fn default_mean_functions(n_clusters: usize) -> Vec<Vec<f64>> {
    if n_clusters == 1 {
        return vec![vec![0.0, 0.0]];
    }
    (0..n_clusters)
        .map(|k| {
            let u = k as f64 / (n_clusters - 1) as f64;
            let a = 1.4 - 2.8 * u;
            let b = -0.1 + 0.2 * u;
            vec![a - 3.0 * b, b]
        })
        .collect()
}

fn eval_poly(coef: &[f64], t: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive");
        }
        if self.schedule.is_empty() {
            return bad("schedule is empty");
        }
        if self.schedule.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return bad("schedule ages must be finite and non-negative");
        }
        if self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return bad("schedule must be strictly increasing");
        }
        if self.n_clusters == 0
            || self.cluster_mean_functions.len() != self.n_clusters
            || self.cluster_weights.len() != self.n_clusters
        {
            return bad("n_clusters must equal the number of mean functions and of weights");
        }
        if self.cluster_mean_functions.iter().any(|c| c.is_empty() || c.iter().any(|x| !x.is_finite())) {
            return bad("mean functions need at least one finite coefficient");
        }
        if self.cluster_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("cluster weights must be non-negative");
        }
        if (self.cluster_weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("cluster weights must sum to 1");
        }
        if !(self.individual_noise_sd >= 0.0) || !self.individual_noise_sd.is_finite() {
            return bad("individual_noise_sd must be finite and non-negative");
        }
        let w = self.individual_wiggle;
        if !(w.amplitude >= 0.0) || !w.amplitude.is_finite() || !(w.lengthscale > 0.0) || !w.lengthscale.is_finite() {
            return bad("wiggle amplitude must be >= 0 and lengthscale > 0");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn cluster_mean(&self, cluster: usize, t: f64) -> f64 {
        eval_poly(&self.cluster_mean_functions[cluster], t)
    }

    /// Smallest pointwise gap between any two cluster mean curves on the schedule.
    pub fn min_mean_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.n_clusters {
            for b in (a + 1)..self.n_clusters {
                for &t in &self.schedule {
                    best = best.min((self.cluster_mean(a, t) - self.cluster_mean(b, t)).abs());
                }
            }
        }
        best
    }

    /// The generative conditional mean of a subject's value at `query_time`
    /// given its cluster and observed values: the cluster mean plus the GP
    /// conditional expectation of the smooth deviation.
    pub fn oracle_predict(&self, cluster: usize, observed: &[Observation], query_time: f64) -> f64 {
        let mean = self.cluster_mean(cluster, query_time);
        let k = self.individual_wiggle.kernel();
        if self.individual_wiggle.amplitude == 0.0 || observed.is_empty() {
            return mean;
        }
        let n = observed.len();
        let noise = self.individual_noise_sd.powi(2);
        let cov = DMatrix::from_fn(n, n, |i, j| {
            se_kernel(observed[i].time, observed[j].time, &k) + if i == j { noise } else { 0.0 }
        });
        let Some((factor, _)) = cholesky_with_jitter(&cov, 1e-12) else {
            return mean;
        };
        let resid = DVector::from_fn(n, |i, _| observed[i].value - self.cluster_mean(cluster, observed[i].time));
        let kq = DVector::from_fn(n, |i, _| se_kernel(query_time, observed[i].time, &k));
        mean + kq.dot(&factor.solve(&resid))
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedCohort {
    pub dataset: TrajectoryDataset,
    /// True cluster of each subject, by subject index.
    pub labels: Vec<usize>,
    pub config: SimulationConfig,
}

impl SimulatedCohort {
    pub fn oracle_predict(&self, subject: usize, observed: &[Observation], query_time: f64) -> f64 {
        self.config.oracle_predict(self.labels[subject], observed, query_time)
    }
}

/// Draw a cohort: cluster by weight, cluster mean curve, plus a smooth GP
/// deviation and iid noise, then drop observations at `missing_rate` while
/// keeping at least one per subject. Deterministic in `cfg.seed`.
pub fn simulate_cohort(cfg: &SimulationConfig) -> Result<SimulatedCohort, DataError> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let m = cfg.schedule.len();
    let wiggle_chol = if cfg.individual_wiggle.amplitude > 0.0 {
        let k = cfg.individual_wiggle.kernel();
        let kmat = DMatrix::from_fn(m, m, |i, j| se_kernel(cfg.schedule[i], cfg.schedule[j], &k));
        let (f, _) = cholesky_with_jitter(&kmat, 1e-10)
            .ok_or_else(|| DataError::InvalidConfig("wiggle covariance is not factorizable".into()))?;
        Some(f.chol.l())
    } else {
        None
    };
    let width = cfg.n_subjects.to_string().len().max(3);

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut labels = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cluster = cfg.n_clusters - 1;
        for (k, w) in cfg.cluster_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                cluster = k;
                break;
            }
        }
        let z: DVector<f64> = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
        let deviation = match &wiggle_chol {
            Some(l) => l * z,
            None => DVector::zeros(m),
        };
        let mut obs = Vec::with_capacity(m);
        for (j, &t) in cfg.schedule.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            let value = cfg.cluster_mean(cluster, t) + deviation[j] + cfg.individual_noise_sd * eps;
            obs.push(Observation::new(t, value));
        }
        if cfg.missing_rate > 0.0 {
            let keep: Vec<bool> = (0..m).map(|_| rng.random::<f64>() >= cfg.missing_rate).collect();
            if keep.iter().any(|&k| k) {
                obs = obs.into_iter().zip(keep).filter_map(|(o, k)| k.then_some(o)).collect();
            } else {
                let j = rng.random_range(0..m);
                obs = vec![obs[j]];
            }
        }
        subjects.push(Subject::new(format!("s{:0width$}", i + 1), obs)?);
        labels.push(cluster);
    }
    let dataset = TrajectoryDataset::new(subjects)?.with_schedule(cfg.schedule.clone())?;
    Ok(SimulatedCohort { dataset, labels, config: cfg.clone() })
}
