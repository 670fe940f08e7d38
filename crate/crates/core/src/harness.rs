//! Experiment configuration, replicated runs and report assembly.
//!
//! Configs are snake_case JSON; reports and manifests are camelCase JSON
//! plus long-format CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{basis_len, product_grid, BasisIndex, SpectralFunction, DEFAULT_GRID};
use crate::dynamics::{check_equilibrium, run_path, FluctuationSample, SimConfig};
use crate::error::{Error, Result};
use crate::kernels::{fix_pi_solve_with_retry, FixPointOptions, FixedPoint, InteractionKernel};
use crate::measure::ProbMeasure;
use crate::operators::LinearResponse;
use crate::ou::{predict, CovarianceMethod, LimitCovariance};
use crate::seed::split_seed;
use crate::stats::{bootstrap_ci, empirical_covariance, ks_normal, variance_se, ConfidenceMatrix};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "SIDLAB_THREADS";

/// Normality is rejected below this KS p-value.
pub const NORMALITY_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    TranslationInvariant {
        a: BTreeMap<String, f64>,
        #[serde(default)]
        constant: f64,
    },
    Diffusion {
        v_coeffs: Vec<f64>,
    },
    General {
        matrix: Vec<Vec<f64>>,
    },
}

impl KernelConfig {
    pub fn build(&self, k: usize) -> Result<InteractionKernel> {
        match self {
            KernelConfig::TranslationInvariant { a, constant } => {
                let mut modes = BTreeMap::new();
                for (key, value) in a {
                    let freq: usize = key.parse().map_err(|_| {
                        Error::config(format!("kernel.a.{key}"), "frequency keys must be positive integers")
                    })?;
                    if freq == 0 || freq > k {
                        return Err(Error::config(
                            format!("kernel.a.{key}"),
                            format!("frequency must lie in 1..={k}"),
                        ));
                    }
                    modes.insert(freq, *value);
                }
                InteractionKernel::translation_invariant(k, modes, *constant)
            }
            KernelConfig::Diffusion { v_coeffs } => {
                let v = coeffs_at(v_coeffs, k).map_err(|m| Error::config("kernel.v_coeffs", m))?;
                Ok(InteractionKernel::diffusion(v))
            }
            KernelConfig::General { matrix } => {
                let n = basis_len(k);
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::config(
                        "kernel.matrix",
                        format!("expected a {n}x{n} matrix for truncation {k}"),
                    ));
                }
                let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
                InteractionKernel::general(m).map_err(|e| Error::config("kernel.matrix", e.to_string()))
            }
        }
    }
}

fn coeffs_at(c: &[f64], k: usize) -> std::result::Result<SpectralFunction, String> {
    let n = basis_len(k);
    if c.len() > n {
        return Err(format!("{} coefficients exceed truncation {k} ({n} allowed)", c.len()));
    }
    let mut v = c.to_vec();
    v.resize(n, 0.0);
    SpectralFunction::from_coeffs(v).map_err(|e| e.to_string())
}

/// A basis label (`const`, `cos3`, `sin1`) or explicit coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TestFunctionConfig {
    Label(String),
    Coeffs {
        name: String,
        coeffs: Vec<f64>,
    },
}

pub fn parse_label(label: &str) -> Option<BasisIndex> {
    if label == "const" {
        return Some(BasisIndex::Constant);
    }
    let (kind, rest) = label.split_at(label.len().min(3));
    let freq: usize = rest.parse().ok().filter(|f| *f > 0)?;
    match kind {
        "cos" => Some(BasisIndex::Cos(freq)),
        "sin" => Some(BasisIndex::Sin(freq)),
        _ => None,
    }
}

impl TestFunctionConfig {
    pub fn name(&self) -> String {
        match self {
            TestFunctionConfig::Label(l) => l.clone(),
            TestFunctionConfig::Coeffs { name, .. } => name.clone(),
        }
    }

    pub fn build(&self, k: usize, key: &str) -> Result<SpectralFunction> {
        match self {
            TestFunctionConfig::Label(l) => {
                let idx = parse_label(l)
                    .ok_or_else(|| Error::config(key, format!("unknown basis label `{l}`")))?;
                if !idx.is_valid_for(k) {
                    return Err(Error::config(key, format!("`{l}` exceeds truncation {k}")));
                }
                Ok(SpectralFunction::basis(k, idx))
            }
            TestFunctionConfig::Coeffs { coeffs, .. } => {
                coeffs_at(coeffs, k).map_err(|m| Error::config(key, m))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    pub s0: f64,
    pub w0: f64,
    /// Density coefficients of `μ_init`; uniform when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            s0: 1.0,
            w0: 1.0,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixpointConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub min_damping: f64,
}

impl Default for FixpointConfig {
    fn default() -> Self {
        let d = FixPointOptions::default();
        Self {
            damping: d.damping,
            tol: d.tol,
            max_iter: d.max_iter,
            min_damping: d.damping / 64.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Density coefficients of the starting measure; uniform when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            horizon: 20.0,
            dt: 0.05,
            start: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuConfig {
    pub times: Vec<f64>,
    pub paths: usize,
    /// Coefficients of `Z_0`; zero when absent.
    pub z0: Option<Vec<f64>>,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self {
            times: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            paths: 10,
            z0: None,
        }
    }
}

fn default_truncation() -> usize {
    8
}
fn default_grid() -> usize {
    DEFAULT_GRID
}
fn default_dt() -> f64 {
    1e-3
}
fn default_replications() -> usize {
    400
}
fn default_resamples() -> usize {
    crate::stats::DEFAULT_RESAMPLES
}
fn default_level() -> f64 {
    crate::stats::DEFAULT_LEVEL
}
fn default_method() -> CovarianceMethod {
    CovarianceMethod::Quadrature
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kernel: KernelConfig,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub warm_start: WarmStartConfig,
    #[serde(default)]
    pub log_times: Vec<f64>,
    #[serde(default)]
    pub test_functions: Vec<TestFunctionConfig>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_method")]
    pub predict_method: CovarianceMethod,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub fixpoint: FixpointConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub ou: OuConfig,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.test_functions.iter().map(|t| t.name()).collect()
    }

    /// Checks everything that does not need numerics.
    pub fn validate(&self) -> Result<()> {
        let k = self.truncation;
        if k == 0 {
            return Err(Error::config("truncation", "must be at least 1"));
        }
        if self.grid < product_grid(k) {
            return Err(Error::config(
                "grid",
                Error::GridTooCoarse {
                    n: self.grid,
                    k,
                    min: product_grid(k),
                }
                .to_string(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if self.replications < 2 {
            return Err(Error::config("replications", "must be at least 2"));
        }
        if self.log_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("log_times", "must be strictly increasing"));
        }
        if let Some(&t) = self.log_times.first() {
            if t.exp() <= self.warm_start.s0 {
                return Err(Error::config("log_times", "first sample time must exceed warm_start.s0"));
            }
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::config("ci_level", "must lie in (0, 1)"));
        }
        self.kernel.build(k)?;
        self.test_function_values()?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<InteractionKernel> {
        self.kernel.build(self.truncation)
    }

    pub fn test_function_values(&self) -> Result<Vec<SpectralFunction>> {
        self.test_functions
            .iter()
            .enumerate()
            .map(|(i, t)| t.build(self.truncation, &format!("test_functions[{i}]")))
            .collect()
    }

    fn measure_from(&self, coeffs: &Option<Vec<f64>>, key: &str) -> Result<ProbMeasure> {
        match coeffs {
            None => Ok(ProbMeasure::uniform(self.truncation)),
            Some(c) => {
                let f = coeffs_at(c, self.truncation).map_err(|m| Error::config(key, m))?;
                ProbMeasure::from_density(f).map_err(|e| Error::config(key, e.to_string()))
            }
        }
    }

    pub fn init_measure(&self) -> Result<ProbMeasure> {
        self.measure_from(&self.warm_start.init, "warm_start.init")
    }

    pub fn flow_start(&self) -> Result<ProbMeasure> {
        self.measure_from(&self.flow.start, "flow.start")
    }

    pub fn fixpoint_options(&self) -> FixPointOptions {
        FixPointOptions {
            damping: self.fixpoint.damping,
            tol: self.fixpoint.tol,
            max_iter: self.fixpoint.max_iter,
        }
    }
}

/// Solves `μ = Π(μ)` from the uniform measure, halving damping on failure.
pub fn solve_equilibrium(spec: &ExperimentSpec, kernel: &InteractionKernel) -> Result<FixedPoint> {
    fix_pi_solve_with_retry(
        kernel,
        &ProbMeasure::uniform(spec.truncation),
        spec.fixpoint_options(),
        spec.fixpoint.min_damping,
    )
}

/// Equilibrium and linear response with all hypothesis gates applied.
pub fn checked_response(spec: &ExperimentSpec) -> Result<(FixedPoint, LinearResponse)> {
    let kernel = spec.kernel()?;
    let fp = solve_equilibrium(spec, &kernel)?;
    check_equilibrium(&kernel, &fp.measure)?;
    let resp = LinearResponse::new(&fp.measure, &kernel)?;
    resp.require_hypothesis()?;
    Ok((fp, resp))
}

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub samples: Vec<FluctuationSample>,
}

pub fn replication_seeds(spec: &ExperimentSpec) -> Vec<u64> {
    (0..spec.replications)
        .map(|r| split_seed(spec.master_seed, r as u64))
        .collect()
}

pub fn sim_config(spec: &ExperimentSpec, mu_star: &ProbMeasure) -> Result<SimConfig> {
    Ok(SimConfig {
        mu_star: mu_star.clone(),
        log_times: spec.log_times.clone(),
        dt: spec.dt,
        s0: spec.warm_start.s0,
        w0: spec.warm_start.w0,
        init: spec.init_measure()?,
        test_functions: spec.test_function_values()?,
    })
}

/// Runs every replication; results are in replication order.
pub fn simulate_replications(
    spec: &ExperimentSpec,
    kernel: &InteractionKernel,
    mu_star: &ProbMeasure,
) -> Result<Vec<std::result::Result<Replication, (usize, Error)>>> {
    if spec.log_times.is_empty() {
        return Err(Error::config("log_times", "at least one sample time is required"));
    }
    let config = sim_config(spec, mu_star)?;
    let seeds = replication_seeds(spec);
    with_pool(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(index, &seed)| {
                run_path(kernel, &config, seed)
                    .map(|samples| Replication { index, seed, samples })
                    .map_err(|e| (index, e))
            })
            .collect()
    })
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PassFlags {
    /// Predicted entry inside the bootstrap interval of the empirical one.
    pub entries: Vec<Vec<bool>>,
    /// KS p-value at least 0.01.
    pub normality: Vec<bool>,
    pub all: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LogTimeReport {
    pub log_time: f64,
    pub empirical_cov: Vec<Vec<f64>>,
    pub predicted_cov: Vec<Vec<f64>>,
    pub bootstrap_ci: ConfidenceMatrix,
    pub variance_standard_errors: Vec<f64>,
    pub normality_p_values: Vec<f64>,
    pub ks_statistics: Vec<f64>,
    pub pass: PassFlags,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CovarianceReport {
    pub test_functions: Vec<String>,
    pub log_times: Vec<f64>,
    pub replications: usize,
    pub completed_replications: usize,
    pub partial: bool,
    pub failures: Vec<String>,
    pub prediction: LimitCovariance,
    pub entries: Vec<LogTimeReport>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub spec_hash: String,
    pub version: String,
    pub master_seed: u64,
    pub replication_seeds: Vec<u64>,
    pub started_at: f64,
    pub finished_at: f64,
    pub mu_star_residual: f64,
    pub mu_star_iterations: usize,
    pub kappa: f64,
    pub spectral_abscissa: f64,
    pub truncation: usize,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: CovarianceReport,
    pub manifest: RunManifest,
    pub replications: Vec<Replication>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Report entry for one log time from the `Δ_t g` rows.
pub fn summarize(
    log_time: f64,
    samples: &DMatrix<f64>,
    predicted: &DMatrix<f64>,
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<LogTimeReport> {
    let m = samples.ncols();
    let emp = empirical_covariance(samples)?;
    let ci = bootstrap_ci(samples, level, resamples, seed)?;
    let mut entries = vec![vec![false; m]; m];
    for (i, row) in entries.iter_mut().enumerate() {
        for (j, flag) in row.iter_mut().enumerate() {
            *flag = ci.contains(i, j, predicted[(i, j)]);
        }
    }
    let mut p_values = Vec::with_capacity(m);
    let mut ks_stats = Vec::with_capacity(m);
    let mut ses = Vec::with_capacity(m);
    for i in 0..m {
        let xs: Vec<f64> = samples.column(i).iter().copied().collect();
        ses.push(variance_se(&xs));
        if predicted[(i, i)] > 0.0 {
            let ks = ks_normal(&xs, predicted[(i, i)])?;
            p_values.push(ks.p_value);
            ks_stats.push(ks.statistic);
        } else {
            p_values.push(f64::NAN);
            ks_stats.push(f64::NAN);
        }
    }
    let normality: Vec<bool> = p_values.iter().map(|p| *p >= NORMALITY_ALPHA).collect();
    let all = entries.iter().flatten().all(|b| *b) && normality.iter().all(|b| *b);
    Ok(LogTimeReport {
        log_time,
        empirical_cov: rows(&emp),
        predicted_cov: rows(predicted),
        bootstrap_ci: ci,
        variance_standard_errors: ses,
        normality_p_values: p_values,
        ks_statistics: ks_stats,
        pass: PassFlags {
            entries,
            normality,
            all,
        },
    })
}

/// Full pipeline: equilibrium, hypothesis gates, prediction, replicated
/// simulation and comparison.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let started_at = now();
    spec.validate()?;
    if spec.test_functions.is_empty() {
        return Err(Error::config("test_functions", "at least one test function is required"));
    }
    let (fp, resp) = checked_response(spec)?;
    let gs = spec.test_function_values()?;
    let labels = spec.labels();
    let prediction = predict(&fp.measure, &resp.kernel, &gs, &labels, spec.predict_method)?;
    let predicted = prediction.to_matrix();

    let results = simulate_replications(spec, &resp.kernel, &fp.measure)?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rep) => done.push(rep),
            Err((_, e)) if e.is_refusal() => return Err(e),
            Err((index, e)) => failures.push(format!("replication {index}: {e}")),
        }
    }
    if done.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "only {} replications completed: {}",
            done.len(),
            failures.join("; ")
        )));
    }

    let m = gs.len();
    let mut entries = Vec::with_capacity(spec.log_times.len());
    for (j, &t) in spec.log_times.iter().enumerate() {
        let samples = DMatrix::from_fn(done.len(), m, |r, i| done[r].samples[j].delta_g[i]);
        let seed = split_seed(spec.master_seed ^ 0xb007_57a9, j as u64);
        entries.push(summarize(t, &samples, &predicted, spec.ci_level, spec.bootstrap_resamples, seed)?);
    }

    let report = CovarianceReport {
        test_functions: labels,
        log_times: spec.log_times.clone(),
        replications: spec.replications,
        completed_replications: done.len(),
        partial: !failures.is_empty(),
        failures,
        prediction,
        entries,
    };
    let manifest = RunManifest {
        spec_hash: spec.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: spec.master_seed,
        replication_seeds: replication_seeds(spec),
        started_at,
        finished_at: now(),
        mu_star_residual: fp.residual,
        mu_star_iterations: fp.iterations,
        kappa: resp.diagnostics.kappa,
        spectral_abscissa: resp.diagnostics.spectral_abscissa,
        truncation: spec.truncation,
        threads: thread_count(),
    };
    Ok(ExperimentOutcome {
        report,
        manifest,
        replications: done,
    })
}

/// Long-format rows `(rep, t, stat_name, value)`.
pub fn write_samples_csv<W: std::io::Write>(
    out: W,
    labels: &[String],
    replications: &[Replication],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "t", "stat_name", "value"])?;
    for rep in replications {
        for s in &rep.samples {
            for (name, v) in labels.iter().zip(&s.delta_g) {
                w.write_record([
                    rep.index.to_string(),
                    s.log_time.to_string(),
                    name.clone(),
                    format!("{v:e}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Flattened report: one row per `(t, i, j)`.
pub fn write_report_csv<W: std::io::Write>(out: W, report: &CovarianceReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t", "stat_i", "stat_j", "empirical", "predicted", "ci_lower", "ci_upper", "pass",
    ])?;
    let names = &report.test_functions;
    for e in &report.entries {
        for i in 0..names.len() {
            for j in 0..names.len() {
                w.write_record([
                    e.log_time.to_string(),
                    names[i].clone(),
                    names[j].clone(),
                    format!("{:e}", e.empirical_cov[i][j]),
                    format!("{:e}", e.predicted_cov[i][j]),
                    format!("{:e}", e.bootstrap_ci.lower[i][j]),
                    format!("{:e}", e.bootstrap_ci.upper[i][j]),
                    e.pass.entries[i][j].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `report.json`, `report.csv`, `samples.csv` and `manifest.json`.
pub fn write_outcome(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    write_report_csv(fs::File::create(dir.join("report.csv"))?, &outcome.report)?;
    write_samples_csv(
        fs::File::create(dir.join("samples.csv"))?,
        &outcome.report.test_functions,
        &outcome.replications,
    )?;
    write_json(&dir.join("manifest.json"), &outcome.manifest)?;
    Ok(())
}
