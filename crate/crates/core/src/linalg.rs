use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `L⁻¹ b`
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().solve_lower_triangular(b).expect("cholesky diagonal is positive")
    }

    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.l_dirty().solve_lower_triangular(b).expect("cholesky diagonal is positive")
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Log density of a zero-mean Gaussian with this covariance at `resid`.
    pub fn gaussian_logpdf(&self, resid: &DVector<f64>) -> f64 {
        let z = self.whiten(resid);
        -0.5 * z.norm_squared() - 0.5 * self.log_det() - 0.5 * resid.len() as f64 * LN_2PI
    }
}

/// Factor `m + jitter·I`, escalating the jitter ×10 (starting from at least
/// [`DEFAULT_JITTER`]) until [`MAX_JITTER`] is exceeded.
///
/// Returns the factor and the matrix that was actually factored.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Option<(Factor, DMatrix<f64>)> {
    let mut j = jitter.max(0.0);
    loop {
        let mut a = m.clone();
        if j > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += j;
            }
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Some((Factor { chol, jitter: j }, a));
        }
        j = if j < DEFAULT_JITTER { DEFAULT_JITTER } else { j * 10.0 };
        if j > MAX_JITTER * (1.0 + 1e-9) {
            return None;
        }
    }
}
