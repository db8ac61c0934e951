//! Acceptance suite. Runs as a plain binary so that every criterion prints a
//! PASS/FAIL line; exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajmix::data::{simulate_cohort, Observation, SimulatedCohort, SimulationConfig, Subject, Wiggle};
use trajmix::dpgp::{fit_dpgp, gibbs_sweep, CrpState, DpgpHyperParams, SamplerSettings};
use trajmix::eval::{
    adjusted_rand_index, make_holdout_split, run_trials, EvalError, FittedModel, ModelConfig, TrajectoryModel,
};
use trajmix::kernels::{assemble_cluster_cov, log_marginal_likelihood, ClusterCovConfig, KernelParams, StackedCluster};
use trajmix::lcmm::{candidate_grid, em_fit, select_model, CovKind, EmSettings, LcmmSpec};
use trajmix::seed::{derive_rng, rng_from_seed};
use trajmix::TrajectoryDataset;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn se(t: f64, t2: f64, variance: f64, lengthscale: f64) -> f64 {
    variance * (-(t - t2).powi(2) / (2.0 * lengthscale * lengthscale)).exp()
}

struct RandomCluster {
    cfg: ClusterCovConfig,
    times: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl RandomCluster {
    fn draw(rng: &mut ChaCha8Rng, max_dim: usize) -> Self {
        let cfg = ClusterCovConfig::new(
            KernelParams { variance: rng.random_range(0.1..3.0), lengthscale: rng.random_range(0.3..4.0) },
            KernelParams { variance: rng.random_range(0.01..1.0), lengthscale: rng.random_range(0.3..4.0) },
            rng.random_range(0.01..0.5),
        );
        let (mut times, mut values) = (Vec::new(), Vec::new());
        let mut dim = 0;
        let target = rng.random_range(1..=max_dim);
        while dim < target {
            let k = rng.random_range(1..=4).min(target - dim);
            let mut t: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..8.0)).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            dim += t.len();
            values.push(t.iter().map(|_| rng.random_range(-2.0..2.0)).collect());
            times.push(t);
        }
        Self { cfg, times, values }
    }

    fn stacked(&self) -> StackedCluster {
        let subjects: Vec<Subject> = self
            .times
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (t, y))| {
                Subject::new(format!("s{i}"), t.iter().zip(y).map(|(&t, &y)| Observation::new(t, y)).collect()).unwrap()
            })
            .collect();
        StackedCluster::from_subjects(&subjects)
    }

    /// `K_f` over all entries plus block-diagonal `K_n` plus `(nugget + jitter) I`.
    fn oracle_cov(&self, jitter: f64) -> DMatrix<f64> {
        let entries: Vec<(usize, f64)> =
            self.times.iter().enumerate().flat_map(|(n, t)| t.iter().map(move |&x| (n, x))).collect();
        let d = entries.len();
        let mut kf = DMatrix::zeros(d, d);
        let mut kn = DMatrix::zeros(d, d);
        for (i, &(ni, ti)) in entries.iter().enumerate() {
            for (j, &(nj, tj)) in entries.iter().enumerate() {
                kf[(i, j)] = se(ti, tj, self.cfg.latent.variance, self.cfg.latent.lengthscale);
                if ni == nj {
                    kn[(i, j)] = se(ti, tj, self.cfg.individual.variance, self.cfg.individual.lengthscale);
                }
            }
        }
        kf + kn + DMatrix::identity(d, d) * (self.cfg.nugget + jitter)
    }

    fn y(&self) -> DVector<f64> {
        DVector::from_iterator(self.values.iter().map(Vec::len).sum(), self.values.iter().flatten().copied())
    }
}

/// Gaussian log density through an explicit inverse and LU determinant.
fn dense_logpdf(cov: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let inv = cov.clone().try_inverse().expect("invertible");
    let quad = (y.transpose() * inv * y)[(0, 0)];
    -0.5 * quad - 0.5 * cov.determinant().ln() - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn likelihood_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let clusters: Vec<RandomCluster> = (0..50).map(|_| RandomCluster::draw(&mut rng, 20)).collect();
    let start = Instant::now();
    let got: Vec<f64> = clusters.iter().map(|c| log_marginal_likelihood(&c.stacked(), &c.cfg).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for (c, g) in clusters.iter().zip(&got) {
        let want = dense_logpdf(&c.oracle_cov(c.cfg.jitter), &c.y());
        worst = worst.max((g - want).abs());
    }
    let msg = format!("max |diff| {worst:.2e} over 50 clusters, {secs:.3}s");
    if worst <= 1e-8 && secs < 1.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn covariance_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = RandomCluster::draw(&mut rng, 20);
        let k = assemble_cluster_cov(&c.stacked(), &c.cfg).unwrap();
        let want = c.oracle_cov(k.jitter());
        worst = worst.max((k.matrix() - want).abs().max());
    }
    let msg = format!("max entry diff {worst:.2e} over 50 configurations");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn two_subject_gibbs() -> Outcome {
    let start = Instant::now();
    let data = TrajectoryDataset::new(vec![
        Subject::new("a", vec![Observation::new(1.5, 0.4), Observation::new(2.0, 0.6), Observation::new(4.0, 0.2)])
            .unwrap(),
        Subject::new("b", vec![Observation::new(2.0, 0.1), Observation::new(5.0, -0.3)]).unwrap(),
    ])
    .unwrap();
    let hyper = DpgpHyperParams {
        cov: ClusterCovConfig::new(
            KernelParams { variance: 0.5, lengthscale: 2.0 },
            KernelParams { variance: 0.1, lengthscale: 1.0 },
            0.05,
        ),
        alpha: 1.3,
    };
    // enumerated posterior: CRP prior ratio together:apart = 1:α
    let single = |i: usize| {
        let c = RandomCluster {
            cfg: hyper.cov,
            times: vec![data.subject(i).times().collect()],
            values: vec![data.subject(i).values().collect()],
        };
        dense_logpdf(&c.oracle_cov(hyper.cov.jitter), &c.y())
    };
    let both = RandomCluster {
        cfg: hyper.cov,
        times: data.subjects().iter().map(|s| s.times().collect()).collect(),
        values: data.subjects().iter().map(|s| s.values().collect()).collect(),
    };
    let log_together = dense_logpdf(&both.oracle_cov(hyper.cov.jitter), &both.y());
    let log_apart = hyper.alpha.ln() + single(0) + single(1);
    let p_together = 1.0 / (1.0 + (log_apart - log_together).exp());

    let sweeps = 10_000;
    let mut stats = Vec::new();
    for seed in 0..5u64 {
        let mut rng = rng_from_seed(seed);
        let mut state = CrpState::single_cluster(2);
        let mut together = 0usize;
        for _ in 0..sweeps {
            state = gibbs_sweep(&state, &data, &hyper, &mut rng).unwrap();
            if state.n_clusters() == 1 {
                together += 1;
            }
        }
        let expected = [p_together * sweeps as f64, (1.0 - p_together) * sweeps as f64];
        let observed = [together as f64, (sweeps - together) as f64];
        let chi2: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
        stats.push(chi2);
    }
    let secs = start.elapsed().as_secs_f64();
    // chi-square with one degree of freedom: p > 0.001 iff statistic < 10.828
    let passed = stats.iter().filter(|&&c| c < 10.828).count();
    let msg = format!(
        "P(together) = {p_together:.4}; chi2 per seed {:?}; {passed}/5 seeds with p > 0.001; {secs:.2}s",
        stats.iter().map(|c| (c * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    if passed == 5 && secs < 30.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn planted_config(seed: u64) -> SimulationConfig {
    SimulationConfig { seed, ..Default::default() }
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let mut aris = Vec::new();
    for seed in 0..10u64 {
        let cfg = planted_config(1000 + seed);
        if cfg.min_mean_separation() < 4.0 * cfg.individual_noise_sd {
            return Err("planted cohort is not separated enough".into());
        }
        let sim = simulate_cohort(&cfg).unwrap();
        let mut rng = derive_rng(seed, "fit", 0);
        let post = fit_dpgp(&sim.dataset, &DpgpHyperParams::default(), &SamplerSettings::default(), &mut rng).unwrap();
        let labels = post.map_state().canonical_labels();
        aris.push(adjusted_rand_index(&labels, &sim.labels).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let good = aris.iter().filter(|&&a| a >= 0.9).count();
    let msg = format!(
        "ARI per seed {:?}; {good}/10 at >= 0.9; {secs:.1}s",
        aris.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    if good >= 8 && secs <= 600.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn em_correctness() -> Outcome {
    let mut worst_drop: f64 = 0.0;
    for i in 0..20u64 {
        let cfg = SimulationConfig {
            n_subjects: 30 + 5 * i as usize,
            missing_rate: 0.15,
            seed: 500 + i,
            ..Default::default()
        };
        let sim = simulate_cohort(&cfg).unwrap();
        let spec = LcmmSpec::new(1 + (i as usize % 3), CovKind::ALL[i as usize % 3]);
        let fit = em_fit(&sim.dataset, &spec, &EmSettings { n_starts: 3, ..Default::default() }, &mut rng_from_seed(i))
            .map_err(|e| format!("{}: {e}", spec.label()))?;
        for w in fit.loglik_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }

    // pooled regression through the normal equations
    let sim = simulate_cohort(&SimulationConfig { missing_rate: 0.2, seed: 77, ..Default::default() }).unwrap();
    let fit =
        em_fit(&sim.dataset, &LcmmSpec::new(1, CovKind::Nc), &EmSettings::default(), &mut rng_from_seed(0)).unwrap();
    let obs: Vec<Observation> = sim.dataset.subjects().iter().flat_map(|s| s.observations().to_vec()).collect();
    let x = DMatrix::from_fn(obs.len(), 2, |i, j| if j == 0 { 1.0 } else { obs[i].time });
    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.value));
    let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / obs.len() as f64;
    let v = fit.params.v[0];
    let diff = (v[0] - beta[0]).abs().max((v[1] - beta[1]).abs()).max((fit.params.sigma_eps2 - s2).abs());

    let msg =
        format!("largest log-likelihood decrease {worst_drop:.2e} over 20 fits; pooled regression diff {diff:.2e}");
    if worst_drop <= 1e-8 && diff <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bic_selection() -> Outcome {
    let mut picks = Vec::new();
    for seed in 0..10u64 {
        let cfg = SimulationConfig {
            individual_wiggle: Wiggle { amplitude: 0.0, lengthscale: 1.0 },
            seed: 2000 + seed,
            ..Default::default()
        };
        let sim = simulate_cohort(&cfg).unwrap();
        let sel = select_model(&sim.dataset, &candidate_grid(&CovKind::ALL, 4), &EmSettings::default(), seed, 4)
            .map_err(|e| e.to_string())?;
        picks.push(sel.table[sel.global_best].spec);
    }
    let g3 = picks.iter().filter(|s| s.n_classes == 3).count();
    let nc = picks.iter().filter(|s| s.cov_kind == CovKind::Nc).count();
    let msg =
        format!("selected {:?}; G=3 on {g3}/10, NC on {nc}/10", picks.iter().map(LcmmSpec::label).collect::<Vec<_>>());
    if g3 >= 8 && nc >= 7 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn protocol_shape() -> Outcome {
    let sim = simulate_cohort(&SimulationConfig::default()).unwrap();
    if sim.dataset.len() != 95 {
        return Err(format!("cohort has {} subjects", sim.dataset.len()));
    }
    for seed in 0..20 {
        let split = make_holdout_split(&sim.dataset, 0.30, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
        if split.heldout.len() != 29 {
            return Err(format!("seed {seed}: {} held out", split.heldout.len()));
        }
        for h in &split.heldout {
            let orig = sim.dataset.subject(h.subject_index);
            let train = split.train.subject(h.subject_index);
            if train.len() + 1 != orig.len() || orig.last().time != h.time || orig.last().value != h.value {
                return Err(format!("seed {seed}: subject {} not split at its final point", h.subject_id));
            }
        }
        if split.reconstruct() != sim.dataset {
            return Err(format!("seed {seed}: reconstruction differs"));
        }
    }
    Ok("29 of 95 final points hidden on 20/20 splits".into())
}

struct Oracle(SimulatedCohort);
struct OracleFit(SimulatedCohort);

impl TrajectoryModel for Oracle {
    fn tag(&self) -> String {
        "oracle".into()
    }
    fn fit(&self, _: &TrajectoryDataset, _: &mut trajmix::seed::Rng) -> Result<Box<dyn FittedModel>, EvalError> {
        Ok(Box::new(OracleFit(self.0.clone())))
    }
}

impl FittedModel for OracleFit {
    fn predict(&self, train: &TrajectoryDataset, queries: &[(usize, f64)]) -> Result<Vec<f64>, EvalError> {
        Ok(queries.iter().map(|&(i, t)| self.0.oracle_predict(i, train.subject(i).observations(), t)).collect())
    }
}

fn predictive_sanity() -> Outcome {
    let sim = simulate_cohort(&planted_config(31)).unwrap();
    let data = &sim.dataset;
    let mean_rmse = |m: &dyn TrajectoryModel| -> Result<f64, String> {
        let r = run_trials(m, data, 0.3, 50, 5, 4).map_err(|e| e.to_string())?;
        Ok(r.metrics.rmse_summary.ok_or("no successful trials")?.mean)
    };
    let oracle = mean_rmse(&Oracle(sim.clone()))?;
    let lcmm = mean_rmse(&ModelConfig::Lcmm { spec: LcmmSpec::new(3, CovKind::Nc), em: EmSettings::default() })?;
    let dpgp =
        mean_rmse(&ModelConfig::Dpgp { hyper: DpgpHyperParams::default(), sampler: SamplerSettings::default() })?;
    let msg = format!(
        "mean RMSE over 50 trials: oracle {oracle:.4}, NC3 {lcmm:.4} ({:.2}x), DPGP {dpgp:.4} ({:.2}x)",
        lcmm / oracle,
        dpgp / oracle
    );
    if lcmm <= 1.5 * oracle && dpgp <= 1.5 * oracle {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn directional_timing() -> Outcome {
    let sim = simulate_cohort(&planted_config(41)).unwrap();
    let mean_secs = |m: &dyn TrajectoryModel| -> Result<f64, String> {
        let r = run_trials(m, &sim.dataset, 0.3, 5, 9, 1).map_err(|e| e.to_string())?;
        Ok(r.fit_seconds_summary.ok_or("no successful trials")?.mean)
    };
    let lcmm = mean_secs(&ModelConfig::Lcmm { spec: LcmmSpec::new(3, CovKind::Nc), em: EmSettings::default() })?;
    let dpgp =
        mean_secs(&ModelConfig::Dpgp { hyper: DpgpHyperParams::default(), sampler: SamplerSettings::default() })?;
    let msg = format!("mean fit seconds with one worker: NC3 {lcmm:.4}, DPGP {dpgp:.4}");
    if lcmm < dpgp {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let status =
        Command::new(env!("CARGO_BIN_EXE_trajmix")).args(args).current_dir(dir).status().map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {status}"))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_cli(&["simulate", "--n", "60", "--seed", "3", "-o", "cohort.csv"], d)?;
    let cases: [&[&str]; 2] = [
        &["eval", "--model", "lcmm", "--classes", "3", "--cov", "ar", "--trials", "6", "--n-starts", "3"],
        &["eval", "--model", "dpgp", "--trials", "3", "--sweeps", "120", "--burnin", "20", "--jobs", "2"],
    ];
    let mut checked = 0;
    for (k, case) in cases.iter().enumerate() {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = format!("r{k}_{rep}.json");
            let mut args = case.to_vec();
            args.extend(["--input", "cohort.csv", "--seed", "11", "-o", &out]);
            run_cli(&args, d)?;
            outs.push(std::fs::read(d.join(format!("r{k}_{rep}.metrics.json"))).map_err(|e| e.to_string())?);
        }
        if outs[0] != outs[1] {
            return Err(format!("{} metric JSON differs between runs", case[2]));
        }
        checked += 1;
    }
    Ok(format!("{checked}/2 eval invocations byte-identical across repeats"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("likelihood oracle", likelihood_oracle),
        ("covariance structure", covariance_structure),
        ("exact two-subject Gibbs posterior", two_subject_gibbs),
        ("planted-cluster recovery", planted_recovery),
        ("EM correctness", em_correctness),
        ("BIC selection", bic_selection),
        ("protocol shape", protocol_shape),
        ("predictive sanity", predictive_sanity),
        ("directional timing", directional_timing),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("acceptance {:>2} PASS  {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("acceptance {:>2} FAIL  {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
