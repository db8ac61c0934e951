//! Command-line front end.
//!
//! Every subcommand resolves its settings from built-in defaults, then an
//! optional `--config` JSON object, then explicit flags, and writes the
//! resolved settings next to its primary output as `<stem>.config.json`.
//! Feeding that file back through `--config` repeats the run.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{
    default_mean_functions, load_csv, save_csv, save_labels, simulate_cohort, zscore_per_timepoint_with,
    SimulationConfig, TrajectoryDataset, Wiggle, ZscoreMode,
};
use crate::dpgp::{fit_dpgp, grid_search, DpgpHyperParams, GridSearchConfig, SamplerSettings};
use crate::eval::{compare_models, run_trials, ModelConfig, TrialReport};
use crate::kernels::{ClusterCovConfig, KernelParams};
use crate::lcmm::{candidate_grid, em_fit, select_model, CovKind, EmSettings, LcmmSpec};
use crate::seed::derive_rng;

#[derive(Debug, Parser)]
#[command(name = "trajmix", version, about = "Trajectory clustering with DP-GP mixtures and latent class mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic cohort with planted clusters.
    Simulate(SimulateFlags),
    /// Standardize values within each time point.
    Zscore(ZscoreFlags),
    /// Sample a DP-GP posterior and write its summary.
    FitDpgp(FitDpgpFlags),
    /// Fit one latent class mixed model.
    FitLcmm(FitLcmmFlags),
    /// Fit a family × class-count grid of LCMMs and rank by BIC.
    SelectLcmm(SelectLcmmFlags),
    /// Repeated final-time-point hold-out evaluation of one model.
    Eval(EvalFlags),
    /// Tabulate several evaluation reports and emit box-plot data.
    Compare(CompareFlags),
    /// Choose DP-GP hyperparameters by held-out RMSE.
    GridSearch(GridSearchFlags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Dpgp,
    Lcmm,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1)"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be finite and > 0"))
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be finite and >= 0"))
    }
}

// ---- flag groups -------------------------------------------------------

#[derive(Debug, Args, Serialize)]
struct ConfigFlag {
    /// JSON object of settings; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct HyperFlags {
    #[arg(long, value_parser = parse_positive)]
    latent_variance: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    latent_lengthscale: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    indiv_variance: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    indiv_lengthscale: Option<f64>,
    #[arg(long, value_parser = parse_nonneg)]
    nugget: Option<f64>,
    /// CRP concentration.
    #[arg(long, value_parser = parse_positive)]
    alpha: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct SamplerFlags {
    /// Total Gibbs sweeps.
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    /// Keep every `thin`-th sweep after burn-in.
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct EmFlags {
    /// Random EM initializations.
    #[arg(long)]
    n_starts: Option<usize>,
    /// Convergence tolerance on the log-likelihood change.
    #[arg(long, value_parser = parse_positive)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct SimulateFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    /// Output CSV; labels go to `<stem>.labels.csv`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Number of subjects.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated measurement ages.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Comma-separated cluster weights.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Standard deviation of the iid measurement noise.
    #[arg(long, value_parser = parse_nonneg)]
    noise_sd: Option<f64>,
    /// Standard deviation of each subject's smooth deviation.
    #[arg(long, value_parser = parse_nonneg)]
    wiggle_amplitude: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    wiggle_lengthscale: Option<f64>,
    #[arg(long, value_parser = parse_fraction)]
    missing_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct ZscoreFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ZscoreMode>,
}

#[derive(Debug, Args, Serialize)]
struct FitDpgpFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Posterior summary JSON.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write the MAP partition as a labels CSV.
    #[arg(long)]
    labels_output: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    hyper: HyperFlags,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct FitLcmmFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    cov: Option<CovKind>,
    #[command(flatten)]
    #[serde(flatten)]
    em: EmFlags,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct SelectLcmmFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Largest class count tried; every count from 1 up is fit.
    #[arg(long)]
    max_classes: Option<usize>,
    /// Comma-separated covariance families.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<CovKind>>,
    #[command(flatten)]
    #[serde(flatten)]
    em: EmFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct EvalFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    #[arg(long)]
    model: Option<ModelFamily>,
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Report JSON; metrics without timing go to `<stem>.metrics.json`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Fraction of subjects whose final observation is hidden.
    #[arg(long, value_parser = parse_fraction)]
    holdout: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    cov: Option<CovKind>,
    #[command(flatten)]
    #[serde(flatten)]
    em: EmFlags,
    #[command(flatten)]
    #[serde(flatten)]
    hyper: HyperFlags,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct CompareFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    /// Report JSON files written by `eval`.
    #[arg(long, num_args = 1..)]
    reports: Option<Vec<PathBuf>>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Box-plot CSV; defaults to `<stem>.figure.csv`.
    #[arg(long)]
    figure_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GridSearchFlags {
    #[command(flatten)]
    #[serde(skip)]
    cfg: ConfigFlag,
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// JSON array of hyperparameter objects.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Result JSON; the winning point also goes to `<stem>.best.json`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_parser = parse_fraction)]
    holdout: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

// ---- resolved settings -------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct HyperConfig {
    latent_variance: f64,
    latent_lengthscale: f64,
    indiv_variance: f64,
    indiv_lengthscale: f64,
    nugget: f64,
    alpha: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        let h = DpgpHyperParams::default();
        Self {
            latent_variance: h.cov.latent.variance,
            latent_lengthscale: h.cov.latent.lengthscale,
            indiv_variance: h.cov.individual.variance,
            indiv_lengthscale: h.cov.individual.lengthscale,
            nugget: h.cov.nugget,
            alpha: h.alpha,
        }
    }
}

impl HyperConfig {
    fn build(&self) -> Result<DpgpHyperParams, CliError> {
        let h = DpgpHyperParams::new(
            ClusterCovConfig::new(
                KernelParams { variance: self.latent_variance, lengthscale: self.latent_lengthscale },
                KernelParams { variance: self.indiv_variance, lengthscale: self.indiv_lengthscale },
                self.nugget,
            ),
            self.alpha,
        );
        h.validate().map_err(|e| CliError::usage("--latent-variance/--indiv-variance/--nugget/--alpha", e))?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SamplerConfig {
    sweeps: usize,
    burnin: usize,
    thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let s = SamplerSettings::default();
        Self { sweeps: s.sweeps, burnin: s.burnin, thin: s.thin }
    }
}

impl SamplerConfig {
    fn build(&self) -> Result<SamplerSettings, CliError> {
        let s = SamplerSettings { sweeps: self.sweeps, burnin: self.burnin, thin: self.thin };
        s.validate().map_err(|e| CliError::usage("--sweeps/--burnin/--thin", e))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EmConfig {
    n_starts: usize,
    tol: f64,
    max_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        let s = EmSettings::default();
        Self { n_starts: s.n_starts, tol: s.tol, max_iters: s.max_iters }
    }
}

impl EmConfig {
    fn build(&self) -> Result<EmSettings, CliError> {
        if self.n_starts == 0 {
            return Err(CliError::usage("--n-starts", "must be >= 1"));
        }
        if self.max_iters == 0 {
            return Err(CliError::usage("--max-iters", "must be >= 1"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(CliError::usage("--tol", "must be finite and > 0"));
        }
        Ok(EmSettings { n_starts: self.n_starts, tol: self.tol, max_iters: self.max_iters })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SimulateSettings {
    output: Option<PathBuf>,
    n: usize,
    schedule: Vec<f64>,
    clusters: usize,
    weights: Option<Vec<f64>>,
    /// Polynomial coefficients per cluster; config file only.
    mean_functions: Option<Vec<Vec<f64>>>,
    noise_sd: f64,
    wiggle_amplitude: f64,
    wiggle_lengthscale: f64,
    missing_rate: f64,
    seed: u64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        let d = SimulationConfig::default();
        Self {
            output: None,
            n: d.n_subjects,
            schedule: d.schedule,
            clusters: d.n_clusters,
            weights: None,
            mean_functions: None,
            noise_sd: d.individual_noise_sd,
            wiggle_amplitude: d.individual_wiggle.amplitude,
            wiggle_lengthscale: d.individual_wiggle.lengthscale,
            missing_rate: d.missing_rate,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct ZscoreSettings {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    mode: ZscoreMode,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FitDpgpSettings {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    labels_output: Option<PathBuf>,
    #[serde(flatten)]
    hyper: HyperConfig,
    #[serde(flatten)]
    sampler: SamplerConfig,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FitLcmmSettings {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    classes: usize,
    cov: CovKind,
    #[serde(flatten)]
    em: EmConfig,
    seed: u64,
}

impl Default for FitLcmmSettings {
    fn default() -> Self {
        Self { input: None, output: None, classes: 3, cov: CovKind::Nc, em: EmConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SelectLcmmSettings {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    max_classes: usize,
    families: Vec<CovKind>,
    #[serde(flatten)]
    em: EmConfig,
    seed: u64,
    jobs: usize,
}

impl Default for SelectLcmmSettings {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            max_classes: 4,
            families: CovKind::ALL.to_vec(),
            em: EmConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    model: Option<ModelFamily>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    holdout: f64,
    trials: usize,
    classes: usize,
    cov: CovKind,
    #[serde(flatten)]
    em: EmConfig,
    #[serde(flatten)]
    hyper: HyperConfig,
    #[serde(flatten)]
    sampler: SamplerConfig,
    seed: u64,
    jobs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            model: None,
            input: None,
            output: None,
            holdout: 0.3,
            trials: 50,
            classes: 3,
            cov: CovKind::Nc,
            em: EmConfig::default(),
            hyper: HyperConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct CompareSettings {
    reports: Vec<PathBuf>,
    output: Option<PathBuf>,
    figure_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GridSearchSettings {
    input: Option<PathBuf>,
    grid: Option<PathBuf>,
    output: Option<PathBuf>,
    holdout: f64,
    trials: usize,
    #[serde(flatten)]
    sampler: SamplerConfig,
    seed: u64,
    jobs: usize,
}

impl Default for GridSearchSettings {
    fn default() -> Self {
        let g = GridSearchConfig::default();
        Self {
            input: None,
            grid: None,
            output: None,
            holdout: g.fraction,
            trials: g.trials,
            sampler: SamplerConfig::default(),
            seed: g.seed,
            jobs: g.jobs,
        }
    }
}

// ---- errors ------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    Usage { flag: String, message: String },
    Runtime(String),
}

impl CliError {
    fn usage(flag: &str, message: impl std::fmt::Display) -> Self {
        CliError::Usage { flag: flag.to_string(), message: message.to_string() }
    }

    fn runtime(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{context}: {err}"))
    }
}

// ---- plumbing ----------------------------------------------------------

/// Defaults, overlaid by the config file, overlaid by non-empty flags.
fn resolve<F: Serialize, S: Serialize + DeserializeOwned + Default>(
    flags: &F,
    config: Option<&Path>,
) -> Result<S, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(S::default()).expect("settings serialize") else {
        unreachable!("settings are structs")
    };
    let known: Vec<String> = merged.keys().cloned().collect();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("--config", format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::usage("--config", format!("{}: {e}", path.display())))?;
        let Value::Object(obj) = value else {
            return Err(CliError::usage("--config", "expected a JSON object"));
        };
        overlay(&mut merged, obj, &known, true)?;
    }
    let Value::Object(flag_values) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flags are structs")
    };
    overlay(&mut merged, flag_values, &known, false)?;
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage("--config", e))
}

fn overlay(
    target: &mut Map<String, Value>,
    source: Map<String, Value>,
    known: &[String],
    from_file: bool,
) -> Result<(), CliError> {
    for (k, v) in source {
        if v.is_null() && !from_file {
            continue;
        }
        if !known.contains(&k) {
            return Err(CliError::usage("--config", format!("unknown setting `{k}`")));
        }
        target.insert(k, v);
    }
    Ok(())
}

fn flag_name(field: &str) -> String {
    format!("--{}", field.replace('_', "-"))
}

fn required<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::usage(&flag_name(field), "is required"))
}

fn check_fraction(x: f64, field: &str) -> Result<(), CliError> {
    if (0.0..1.0).contains(&x) {
        Ok(())
    } else {
        Err(CliError::usage(&flag_name(field), format!("{x} is outside [0, 1)")))
    }
}

/// `dir/name.ext` → `dir/name<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(path.display(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::runtime(path.display(), e))
}

fn write_sidecar<S: Serialize>(output: &Path, settings: &S) -> Result<(), CliError> {
    write_json(&sibling(output, ".config.json"), settings)
}

fn load(path: &Path) -> Result<TrajectoryDataset, CliError> {
    load_csv(path).map_err(|e| CliError::runtime(path.display(), e))
}

// ---- subcommands -------------------------------------------------------

fn simulate(flags: &SimulateFlags) -> Result<(), CliError> {
    let mut s: SimulateSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let output = required(&s.output, "output")?.clone();
    if s.n == 0 {
        return Err(CliError::usage("--n", "must be >= 1"));
    }
    if s.clusters == 0 {
        return Err(CliError::usage("--clusters", "must be >= 1"));
    }
    if s.schedule.is_empty() || s.schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::usage("--schedule", "must be a non-empty increasing list"));
    }
    check_fraction(s.missing_rate, "missing_rate")?;
    let weights = s.weights.get_or_insert_with(|| {
        if s.clusters == 3 {
            SimulationConfig::default().cluster_weights
        } else {
            vec![1.0 / s.clusters as f64; s.clusters]
        }
    });
    if weights.len() != s.clusters
        || weights.iter().any(|w| !(*w >= 0.0))
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CliError::usage("--weights", format!("need {} non-negative weights summing to 1", s.clusters)));
    }
    let means = s.mean_functions.get_or_insert_with(|| default_mean_functions(s.clusters));
    if means.len() != s.clusters {
        return Err(CliError::usage("--config", format!("mean_functions must have {} entries", s.clusters)));
    }
    let cfg = SimulationConfig {
        n_subjects: s.n,
        schedule: s.schedule.clone(),
        n_clusters: s.clusters,
        cluster_mean_functions: means.clone(),
        cluster_weights: weights.clone(),
        individual_noise_sd: s.noise_sd,
        individual_wiggle: Wiggle { amplitude: s.wiggle_amplitude, lengthscale: s.wiggle_lengthscale },
        missing_rate: s.missing_rate,
        seed: s.seed,
    };
    cfg.validate().map_err(|e| CliError::usage("--config", e))?;
    let cohort = simulate_cohort(&cfg).map_err(|e| CliError::runtime("simulate", e))?;
    save_csv(&cohort.dataset, &output).map_err(|e| CliError::runtime(output.display(), e))?;
    let labels = sibling(&output, ".labels.csv");
    save_labels(&cohort.dataset, &cohort.labels, &labels).map_err(|e| CliError::runtime(labels.display(), e))?;
    write_sidecar(&output, &s)
}

fn zscore(flags: &ZscoreFlags) -> Result<(), CliError> {
    let s: ZscoreSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    let data = load(input)?;
    let z = zscore_per_timepoint_with(&data, s.mode).map_err(|e| CliError::runtime("zscore", e))?;
    save_csv(&z, output).map_err(|e| CliError::runtime(output.display(), e))?;
    write_sidecar(output, &s)
}

fn fit_dpgp_cmd(flags: &FitDpgpFlags) -> Result<(), CliError> {
    let s: FitDpgpSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    let hyper = s.hyper.build()?;
    let sampler = s.sampler.build()?;
    let data = load(input)?;
    let mut rng = derive_rng(s.seed, "fit", 0);
    let post = fit_dpgp(&data, &hyper, &sampler, &mut rng).map_err(|e| CliError::runtime("fit-dpgp", e))?;
    write_json(output, &post.summary(&data))?;
    if let Some(path) = &s.labels_output {
        let labels = post.map_state().canonical_labels();
        save_labels(&data, &labels, path).map_err(|e| CliError::runtime(path.display(), e))?;
    }
    write_sidecar(output, &s)
}

fn fit_lcmm_cmd(flags: &FitLcmmFlags) -> Result<(), CliError> {
    let s: FitLcmmSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    if s.classes == 0 {
        return Err(CliError::usage("--classes", "must be >= 1"));
    }
    let em = s.em.build()?;
    let data = load(input)?;
    let spec = LcmmSpec::new(s.classes, s.cov);
    let mut rng = derive_rng(s.seed, "fit", 0);
    let fit = em_fit(&data, &spec, &em, &mut rng).map_err(|e| CliError::runtime("fit-lcmm", e))?;
    write_json(output, &fit)?;
    write_sidecar(output, &s)
}

fn select_lcmm_cmd(flags: &SelectLcmmFlags) -> Result<(), CliError> {
    let s: SelectLcmmSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    if s.max_classes == 0 {
        return Err(CliError::usage("--max-classes", "must be >= 1"));
    }
    if s.families.is_empty() {
        return Err(CliError::usage("--families", "must name at least one family"));
    }
    let em = s.em.build()?;
    let data = load(input)?;
    let candidates = candidate_grid(&s.families, s.max_classes);
    let sel = select_model(&data, &candidates, &em, s.seed, s.jobs).map_err(|e| CliError::runtime("select-lcmm", e))?;
    write_json(output, &sel)?;
    write_sidecar(output, &s)
}

fn eval_cmd(flags: &EvalFlags) -> Result<(), CliError> {
    let s: EvalSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let family = *required(&s.model, "model")?;
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    check_fraction(s.holdout, "holdout")?;
    if s.trials == 0 {
        return Err(CliError::usage("--trials", "must be >= 1"));
    }
    let model = match family {
        ModelFamily::Dpgp => ModelConfig::Dpgp { hyper: s.hyper.build()?, sampler: s.sampler.build()? },
        ModelFamily::Lcmm => {
            if s.classes == 0 {
                return Err(CliError::usage("--classes", "must be >= 1"));
            }
            ModelConfig::Lcmm { spec: LcmmSpec::new(s.classes, s.cov), em: s.em.build()? }
        }
    };
    let data = load(input)?;
    if crate::eval::holdout_count(s.holdout, data.len()) == 0 {
        return Err(CliError::usage("--holdout", format!("{} holds out no subjects of {}", s.holdout, data.len())));
    }
    let report =
        run_trials(&model, &data, s.holdout, s.trials, s.seed, s.jobs).map_err(|e| CliError::runtime("eval", e))?;
    write_json(output, &report)?;
    write_json(&sibling(output, ".metrics.json"), &report.metrics)?;
    write_sidecar(output, &s)
}

fn compare_cmd(flags: &CompareFlags) -> Result<(), CliError> {
    let mut s: CompareSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let output = required(&s.output, "output")?.clone();
    if s.reports.len() < 2 {
        return Err(CliError::usage("--reports", "needs at least two report files"));
    }
    let figure = s.figure_csv.get_or_insert_with(|| sibling(&output, ".figure.csv")).clone();
    let reports = s
        .reports
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::runtime(p.display(), e))?;
            serde_json::from_str::<TrialReport>(&text).map_err(|e| CliError::runtime(p.display(), e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let table = compare_models(&reports).map_err(|e| CliError::runtime("compare", e))?;
    write_json(&output, &table)?;
    table.write_figure_csv(&figure).map_err(|e| CliError::runtime(figure.display(), e))?;
    write_sidecar(&output, &s)
}

fn grid_search_cmd(flags: &GridSearchFlags) -> Result<(), CliError> {
    let s: GridSearchSettings = resolve(flags, flags.cfg.config.as_deref())?;
    let input = required(&s.input, "input")?;
    let grid_path = required(&s.grid, "grid")?;
    let output = required(&s.output, "output")?;
    check_fraction(s.holdout, "holdout")?;
    if s.trials == 0 {
        return Err(CliError::usage("--trials", "must be >= 1"));
    }
    let sampler = s.sampler.build()?;
    let text = std::fs::read_to_string(grid_path).map_err(|e| CliError::runtime(grid_path.display(), e))?;
    let grid: Vec<DpgpHyperParams> =
        serde_json::from_str(&text).map_err(|e| CliError::usage("--grid", format!("{}: {e}", grid_path.display())))?;
    let data = load(input)?;
    let cfg = GridSearchConfig { fraction: s.holdout, trials: s.trials, seed: s.seed, sampler, jobs: s.jobs };
    let result = grid_search(&data, &grid, &cfg).map_err(|e| CliError::runtime("grid-search", e))?;
    write_json(output, &result)?;
    write_json(&sibling(output, ".best.json"), &result.best)?;
    write_sidecar(output, &s)
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, result) = match &cli.command {
        Command::Simulate(f) => ("simulate", simulate(f)),
        Command::Zscore(f) => ("zscore", zscore(f)),
        Command::FitDpgp(f) => ("fit-dpgp", fit_dpgp_cmd(f)),
        Command::FitLcmm(f) => ("fit-lcmm", fit_lcmm_cmd(f)),
        Command::SelectLcmm(f) => ("select-lcmm", select_lcmm_cmd(f)),
        Command::Eval(f) => ("eval", eval_cmd(f)),
        Command::Compare(f) => ("compare", compare_cmd(f)),
        Command::GridSearch(f) => ("grid-search", grid_search_cmd(f)),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage { flag, message }) => {
            let mut cmd = Cli::command();
            let usage = cmd.find_subcommand_mut(name).map(|c| c.render_usage().to_string()).unwrap_or_default();
            eprintln!("error: invalid value for '{flag}': {message}\n\n{usage}\n\nFor more information, try 'trajmix {name} --help'.");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
