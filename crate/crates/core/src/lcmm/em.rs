//! Expectation–conditional-maximization for [`LcmmSpec`] models.
//!
//! Each iteration updates π and the class trends in closed form (weighted
//! generalized least squares under the current covariance), then the
//! covariance parameters by coordinate-wise golden-section search on the
//! expected complete-data log-likelihood, accepting a coordinate move only if
//! it does not lower that objective. Every conditional step is therefore
//! non-decreasing and so is the observed log-likelihood.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    bic_value, design, log_sum_exp, CovKind, LcmmError, LcmmFit, LcmmParams, LcmmSpec, SubjectCov, TimeCovariance,
};
use crate::data::TrajectoryDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    pub n_starts: usize,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self { n_starts: 10, tol: 1e-6, max_iters: 500 }
    }
}

const GOLDEN_ITERS: usize = 30;
const LOCAL_BRACKET: f64 = 2.0;
const KMEANS_ITERS: usize = 50;

struct Prepared {
    times: Vec<Vec<f64>>,
    y: Vec<DVector<f64>>,
    x: Vec<DMatrix<f64>>,
    n_obs: usize,
    pooled_var: f64,
    mean_time: f64,
    /// Subjects grouped by identical observation times.
    patterns: Vec<(Vec<f64>, Vec<usize>)>,
}

impl Prepared {
    fn new(data: &TrajectoryDataset) -> Self {
        let times: Vec<Vec<f64>> = data.subjects().iter().map(|s| s.times().collect()).collect();
        let y: Vec<DVector<f64>> =
            data.subjects().iter().map(|s| DVector::from_iterator(s.len(), s.values())).collect();
        let x = times.iter().map(|t| design(t)).collect();
        let n_obs: usize = times.iter().map(Vec::len).sum();
        let all: Vec<f64> = y.iter().flat_map(|v| v.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / n_obs as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_obs as f64;
        let mean_time = times.iter().flatten().sum::<f64>() / n_obs as f64;
        let mut patterns: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
        for (i, t) in times.iter().enumerate() {
            match patterns.iter_mut().find(|(p, _)| p == t) {
                Some((_, members)) => members.push(i),
                None => patterns.push((t.clone(), vec![i])),
            }
        }
        Self {
            times,
            y,
            x,
            n_obs,
            pooled_var: if var > 0.0 { var } else { 1.0 },
            mean_time: mean_time.max(1e-3),
            patterns,
        }
    }

    fn n(&self) -> usize {
        self.y.len()
    }
}

/// Covariance parameters on the log scale, in a fixed coordinate order.
fn pack(within: &TimeCovariance, sigma_eps2: f64) -> Vec<f64> {
    match *within {
        TimeCovariance::None => vec![sigma_eps2.ln()],
        TimeCovariance::Ar { variance, decay } => vec![variance.ln(), decay.ln(), sigma_eps2.ln()],
        TimeCovariance::Bm { variance } => vec![variance.ln(), sigma_eps2.ln()],
    }
}

fn unpack(kind: CovKind, p: &[f64]) -> (TimeCovariance, f64) {
    match kind {
        CovKind::Nc => (TimeCovariance::None, p[0].exp()),
        CovKind::Ar => (TimeCovariance::Ar { variance: p[0].exp(), decay: p[1].exp() }, p[2].exp()),
        CovKind::Bm => (TimeCovariance::Bm { variance: p[0].exp() }, p[1].exp()),
    }
}

fn bounds(kind: CovKind, prep: &Prepared) -> Vec<(f64, f64)> {
    let var = ((1e-6 * prep.pooled_var).ln(), (10.0 * prep.pooled_var).ln());
    match kind {
        CovKind::Nc => vec![var],
        CovKind::Ar => vec![var, (1e-3f64.ln(), 1e2f64.ln()), var],
        CovKind::Bm => {
            let bm = ((1e-6 * prep.pooled_var / prep.mean_time).ln(), (10.0 * prep.pooled_var / prep.mean_time).ln());
            vec![bm, var]
        }
    }
}

fn initial_cov(kind: CovKind, prep: &Prepared) -> (TimeCovariance, f64) {
    let v = prep.pooled_var;
    match kind {
        CovKind::Nc => (TimeCovariance::None, 0.5 * v),
        CovKind::Ar => (TimeCovariance::Ar { variance: 0.25 * v, decay: 0.5 }, 0.25 * v),
        CovKind::Bm => (TimeCovariance::Bm { variance: 0.25 * v / prep.mean_time }, 0.25 * v),
    }
}

/// Expected complete-data log-likelihood terms that depend on the covariance:
/// `Σ_i −½ log|Σ_i| − ½ ‖L_i⁻¹ C_i‖²_F`, with `C_i C_iᵀ = Σ_g τ_ig r_ig r_igᵀ`.
fn cov_objective(prep: &Prepared, weighted_resid: &[DMatrix<f64>], within: &TimeCovariance, sigma_eps2: f64) -> f64 {
    let mut total = 0.0;
    for (t, members) in &prep.patterns {
        let Ok(cov) = SubjectCov::new(t, within, sigma_eps2) else {
            return f64::NEG_INFINITY;
        };
        for &i in members {
            let c = &weighted_resid[i];
            total += match &cov {
                SubjectCov::Iid(s2) => -0.5 * t.len() as f64 * s2.ln() - 0.5 * c.norm_squared() / s2,
                SubjectCov::Full(f) => -0.5 * f.log_det() - 0.5 * f.whiten_mat(c).norm_squared(),
            };
        }
    }
    total
}

fn golden_max(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

struct Run {
    params: LcmmParams,
    loglik: f64,
    trace: Vec<f64>,
    posteriors: Vec<Vec<f64>>,
    converged: bool,
}

struct Degenerate;

fn m_step(prep: &Prepared, spec: &LcmmSpec, tau: &[Vec<f64>], params: &mut LcmmParams) -> Result<(), Degenerate> {
    let n = prep.n();
    let g_count = spec.n_classes;
    let floor = 1.0 / (10.0 * n as f64);

    let mass: Vec<f64> = (0..g_count).map(|g| tau.iter().map(|row| row[g]).sum::<f64>()).collect();
    let pi: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();
    if pi.iter().any(|&p| p < floor) {
        return Err(Degenerate);
    }
    params.pi = pi;

    // trends by weighted GLS under the current covariance
    let mut lhs = vec![Matrix2::<f64>::zeros(); g_count];
    let mut rhs = vec![Vector2::<f64>::zeros(); g_count];
    for (t, members) in &prep.patterns {
        let cov = SubjectCov::new(t, &params.within, params.sigma_eps2).map_err(|_| Degenerate)?;
        let wx = cov.whiten_mat(&prep.x[members[0]]);
        let xtx = wx.transpose() * &wx;
        for &i in members {
            let wy = cov.whiten_mat(&DMatrix::from_column_slice(prep.y[i].len(), 1, prep.y[i].as_slice()));
            let xty = wx.transpose() * &wy;
            for g in 0..g_count {
                let w = tau[i][g];
                lhs[g] += Matrix2::new(xtx[(0, 0)], xtx[(0, 1)], xtx[(1, 0)], xtx[(1, 1)]) * w;
                rhs[g] += Vector2::new(xty[(0, 0)], xty[(1, 0)]) * w;
            }
        }
    }
    for g in 0..g_count {
        let scale = lhs[g].abs().max();
        if !(lhs[g].determinant().abs() > 1e-12 * scale * scale) {
            return Err(Degenerate);
        }
        let sol = lhs[g].lu().solve(&rhs[g]).ok_or(Degenerate)?;
        params.v[g] = [sol[0], sol[1]];
    }

    // weighted residual factors C_i
    let resid: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let t = &prep.times[i];
            DMatrix::from_fn(t.len(), g_count, |j, g| tau[i][g].sqrt() * (prep.y[i][j] - params.class_mean(g, t[j])))
        })
        .collect();

    match spec.cov_kind {
        CovKind::Nc => {
            let ss: f64 = resid.iter().map(|c| c.norm_squared()).sum();
            let lo = 1e-6 * prep.pooled_var;
            params.sigma_eps2 = (ss / prep.n_obs as f64).max(lo);
        }
        kind => {
            let mut p = pack(&params.within, params.sigma_eps2);
            let eval = |p: &[f64]| {
                let (w, s) = unpack(kind, p);
                cov_objective(prep, &resid, &w, s)
            };
            let mut best = eval(&p);
            for (k, &(lo, hi)) in bounds(kind, prep).iter().enumerate() {
                let a = (p[k] - LOCAL_BRACKET).max(lo);
                let b = (p[k] + LOCAL_BRACKET).min(hi);
                let mut trial = p.clone();
                let (x, fx) = golden_max(
                    |x| {
                        trial[k] = x;
                        eval(&trial)
                    },
                    a,
                    b,
                );
                if fx > best {
                    p[k] = x;
                    best = fx;
                }
            }
            let (w, s) = unpack(kind, &p);
            params.within = w;
            params.sigma_eps2 = s;
        }
    }
    Ok(())
}

/// Returns the observed log-likelihood and the class posteriors.
fn e_step(prep: &Prepared, params: &LcmmParams) -> Result<(f64, Vec<Vec<f64>>), LcmmError> {
    let mut total = 0.0;
    let mut tau = vec![Vec::new(); prep.n()];
    for (t, members) in &prep.patterns {
        let cov = SubjectCov::new(t, &params.within, params.sigma_eps2)?;
        for &i in members {
            let terms: Vec<f64> = (0..params.v.len())
                .map(|g| {
                    let resid = DVector::from_fn(t.len(), |j, _| prep.y[i][j] - params.class_mean(g, t[j]));
                    params.pi[g].ln() + cov.logpdf(&resid)
                })
                .collect();
            let lse = log_sum_exp(&terms);
            total += lse;
            tau[i] = terms.iter().map(|x| (x - lse).exp()).collect();
        }
    }
    Ok((total, tau))
}

fn run_em(
    prep: &Prepared,
    spec: &LcmmSpec,
    settings: &EmSettings,
    mut tau: Vec<Vec<f64>>,
) -> Result<Result<Run, Degenerate>, LcmmError> {
    let (within, sigma_eps2) = initial_cov(spec.cov_kind, prep);
    let mut params = LcmmParams {
        pi: vec![1.0 / spec.n_classes as f64; spec.n_classes],
        v: vec![[0.0, 0.0]; spec.n_classes],
        within,
        sigma_eps2,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..settings.max_iters {
        if m_step(prep, spec, &tau, &mut params).is_err() {
            return Ok(Err(Degenerate));
        }
        let (ll, next) = e_step(prep, &params)?;
        if !ll.is_finite() {
            return Ok(Err(Degenerate));
        }
        tau = next;
        let done = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < settings.tol);
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
    }
    let loglik = *trace.last().expect("max_iters >= 1");
    Ok(Ok(Run { params, loglik, trace, posteriors: tau, converged }))
}

/// Per-subject OLS `(intercept, slope)`; subjects with one observation get
/// slope 0.
fn ols_features(prep: &Prepared) -> Vec<[f64; 2]> {
    prep.times
        .iter()
        .zip(&prep.y)
        .map(|(t, y)| {
            let n = t.len() as f64;
            let tm = t.iter().sum::<f64>() / n;
            let ym = y.iter().sum::<f64>() / n;
            let stt: f64 = t.iter().map(|x| (x - tm).powi(2)).sum();
            if t.len() < 2 || stt <= 0.0 {
                return [ym, 0.0];
            }
            let sty: f64 = t.iter().zip(y.iter()).map(|(x, v)| (x - tm) * (v - ym)).sum();
            let slope = sty / stt;
            [ym - slope * tm, slope]
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations on standardized features.
fn kmeans_labels<R: Rng + ?Sized>(features: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<usize> {
    let n = features.len();
    let mut sd = [0.0; 2];
    for d in 0..2 {
        let m = features.iter().map(|f| f[d]).sum::<f64>() / n as f64;
        let v = features.iter().map(|f| (f[d] - m).powi(2)).sum::<f64>() / n as f64;
        sd[d] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let pts: Vec<[f64; 2]> = features.iter().map(|f| [f[0] / sd[0], f[1] / sd[1]]).collect();
    let dist2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);

    let mut centers = vec![pts[rng.random_range(0..n)]];
    while centers.len() < k {
        let d: Vec<f64> =
            pts.iter().map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d.iter()
                .position(|x| {
                    acc += x;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next]);
    }

    let mut labels = vec![0; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b]))).expect("k >= 1");
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (g, c) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = pts.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let m = members.len() as f64;
                *c = [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m];
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Fit by EM from `n_starts` randomized k-means initializations and keep the
/// highest log-likelihood. Starts in which a class loses nearly all mass are
/// discarded and counted; if every start degenerates the fit fails.
pub fn em_fit<R: Rng + ?Sized>(
    data: &TrajectoryDataset,
    spec: &LcmmSpec,
    settings: &EmSettings,
    rng: &mut R,
) -> Result<LcmmFit, LcmmError> {
    if spec.n_classes == 0 {
        return Err(LcmmError::InvalidParams("n_classes must be >= 1".into()));
    }
    if data.len() < spec.n_classes {
        return Err(LcmmError::InvalidData(format!(
            "{} subjects cannot support {} classes",
            data.len(),
            spec.n_classes
        )));
    }
    if !(settings.tol > 0.0) || settings.max_iters == 0 || settings.n_starts == 0 {
        return Err(LcmmError::InvalidParams("tol, max_iters and n_starts must be positive".into()));
    }
    let prep = Prepared::new(data);
    let features = ols_features(&prep);
    let starts = if spec.n_classes == 1 { 1 } else { settings.n_starts };

    let mut best: Option<Run> = None;
    let mut degenerate = 0;
    for _ in 0..starts {
        let labels =
            if spec.n_classes == 1 { vec![0; data.len()] } else { kmeans_labels(&features, spec.n_classes, rng) };
        let tau: Vec<Vec<f64>> =
            labels.iter().map(|&l| (0..spec.n_classes).map(|g| if g == l { 1.0 } else { 0.0 }).collect()).collect();
        match run_em(&prep, spec, settings, tau)? {
            Ok(run) => {
                if best.as_ref().is_none_or(|b| run.loglik > b.loglik) {
                    best = Some(run);
                }
            }
            Err(Degenerate) => degenerate += 1,
        }
    }
    let run = best.ok_or(LcmmError::Degenerate { restarts: degenerate })?;
    let n_params = spec.n_params();
    Ok(LcmmFit {
        spec: *spec,
        beta: [0.0, 0.0],
        bic: bic_value(run.loglik, n_params, data.len()),
        loglik: run.loglik,
        n_params,
        subject_ids: data.subjects().iter().map(|s| s.id().to_string()).collect(),
        posteriors: run.posteriors,
        iterations: run.trace.len(),
        loglik_trace: run.trace,
        converged: run.converged,
        degenerate_starts: degenerate,
        params: run.params,
    })
}
