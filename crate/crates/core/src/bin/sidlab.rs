use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use sidlab::basis::{BasisIndex, SpectralFunction};
use sidlab::dynamics::ode_flow;
use sidlab::harness::{
    checked_response, run_experiment, simulate_replications, solve_equilibrium,
    write_outcome, write_samples_csv, ExperimentSpec,
};
use sidlab::operators::{LinearResponse, OperatorDiagnostics};
use sidlab::ou::{mercer_of_response, ou_solve, predict, LimitCovariance};
use sidlab::seed::split_seed;
use sidlab::{Error, Result};

const MERCER_REL_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(name = "sidlab", version, about = "Self-interacting diffusions on the circle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or directory for `compare`. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `replications` (or `ou.paths` for `ou-sample`).
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve μ = Π(μ) and print the coefficients of μ* with the residual.
    Fixpoint,
    /// Trajectory of the deterministic semiflow as long-format CSV.
    Flow,
    /// Replicated paths as long-format CSV of Δ_t g.
    Simulate,
    /// Predicted limit covariance with the operators behind it.
    Predict,
    /// Sample paths of the limiting Ornstein-Uhlenbeck process.
    OuSample,
    /// Full experiment: writes report.json, report.csv, samples.csv, manifest.json.
    Compare,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) if e.is_refusal() => {
            eprintln!("refused: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn broken_pipe(e: &Error) -> bool {
    use std::io::ErrorKind::BrokenPipe;
    match e {
        Error::Io(io) => io.kind() == BrokenPipe,
        Error::Json(j) => j.io_error_kind() == Some(BrokenPipe),
        Error::Csv(c) => matches!(c.kind(), csv::ErrorKind::Io(io) if io.kind() == BrokenPipe),
        _ => false,
    }
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config", "a config file is required"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    let mut spec = ExperimentSpec::from_json(&text)?;
    if let Some(seed) = cli.seed {
        spec.master_seed = seed;
    }
    if let Some(reps) = cli.reps {
        spec.replications = reps;
        spec.ou.paths = reps;
    }
    spec.validate()?;
    Ok(spec)
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(fs::File::create(p)?)
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn emit_json<T: Serialize>(cli: &Cli, value: &T) -> Result<()> {
    let mut w = output(cli)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn note(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let spec = load_spec(cli)?;
    match cli.command {
        Command::Fixpoint => fixpoint(cli, &spec),
        Command::Flow => flow(cli, &spec),
        Command::Simulate => simulate(cli, &spec),
        Command::Predict => predict_cmd(cli, &spec),
        Command::OuSample => ou_sample(cli, &spec),
        Command::Compare => compare(cli, &spec),
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct FixpointOut {
    basis: Vec<String>,
    coefficients: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn basis_names(k: usize) -> Vec<String> {
    (0..2 * k + 1)
        .map(|p| BasisIndex::from_position(p).to_string())
        .collect()
}

fn fixpoint(cli: &Cli, spec: &ExperimentSpec) -> Result<()> {
    let kernel = spec.kernel()?;
    let fp = solve_equilibrium(spec, &kernel)?;
    note(cli, format!("residual {:e} after {} iterations", fp.residual, fp.iterations));
    emit_json(
        cli,
        &FixpointOut {
            basis: basis_names(spec.truncation),
            coefficients: fp.measure.density().coeffs().iter().copied().collect(),
            residual: fp.residual,
            iterations: fp.iterations,
        },
    )
}

fn flow(cli: &Cli, spec: &ExperimentSpec) -> Result<()> {
    let kernel = spec.kernel()?;
    let states = ode_flow(&kernel, &spec.flow_start()?, spec.flow.horizon, spec.flow.dt)?;
    let names = basis_names(spec.truncation);
    let mut w = csv::Writer::from_writer(output(cli)?);
    w.write_record(["t", "basis", "value"])?;
    for s in &states {
        for (name, v) in names.iter().zip(s.mu.density().coeffs().iter()) {
            w.write_record([s.time.to_string(), name.clone(), format!("{v:e}")])?;
        }
    }
    w.flush()?;
    note(cli, format!("{} flow states", states.len()));
    Ok(())
}

fn simulate(cli: &Cli, spec: &ExperimentSpec) -> Result<()> {
    let kernel = spec.kernel()?;
    let fp = solve_equilibrium(spec, &kernel)?;
    let mut done = Vec::new();
    for r in simulate_replications(spec, &kernel, &fp.measure)? {
        done.push(r.map_err(|(_, e)| e)?);
    }
    write_samples_csv(output(cli)?, &spec.labels(), &done)?;
    note(cli, format!("{} replications", done.len()));
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Operators {
    basis: Vec<String>,
    g: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    c_hat: Vec<Vec<f64>>,
    c_kernel: Vec<Vec<f64>>,
    diagnostics: OperatorDiagnostics,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct PredictOut {
    #[serde(flatten)]
    covariance: LimitCovariance,
    mu_star: Vec<f64>,
    operators: Operators,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn operators(resp: &LinearResponse) -> Operators {
    Operators {
        basis: basis_names(resp.truncation()),
        g: rows(resp.g.matrix()),
        q: rows(resp.q.matrix()),
        c_hat: rows(&resp.c_hat_symmetric()),
        c_kernel: rows(&resp.c_kernel_coefficients()),
        diagnostics: resp.diagnostics,
    }
}

fn predict_cmd(cli: &Cli, spec: &ExperimentSpec) -> Result<()> {
    let (fp, resp) = checked_response(spec)?;
    let gs = spec.test_function_values()?;
    if gs.is_empty() {
        return Err(Error::config("test_functions", "at least one test function is required"));
    }
    let covariance = predict(&fp.measure, &resp.kernel, &gs, &spec.labels(), spec.predict_method)?;
    emit_json(
        cli,
        &PredictOut {
            covariance,
            mu_star: fp.measure.density().coeffs().iter().copied().collect(),
            operators: operators(&resp),
        },
    )
}

fn ou_sample(cli: &Cli, spec: &ExperimentSpec) -> Result<()> {
    let (_, resp) = checked_response(spec)?;
    let dec = mercer_of_response(&resp, MERCER_REL_TOL)?;
    let k = spec.truncation;
    let z0 = match &spec.ou.z0 {
        None => SpectralFunction::zeros(k),
        Some(c) => {
            if c.len() > 2 * k + 1 {
                return Err(Error::config("ou.z0", format!("more than {} coefficients", 2 * k + 1)));
            }
            let mut v = c.clone();
            v.resize(2 * k + 1, 0.0);
            SpectralFunction::from_coeffs(v)?
        }
    };
    let paths: Vec<_> = (0..spec.ou.paths)
        .into_par_iter()
        .map(|p| ou_solve(&resp.g, &dec, &z0, &spec.ou.times, split_seed(spec.master_seed, p as u64)))
        .collect::<Result<_>>()?;
    let names = basis_names(k);
    let mut w = csv::Writer::from_writer(output(cli)?);
    w.write_record(["path", "t", "basis", "value"])?;
    for (p, path) in paths.iter().enumerate() {
        for (t, z) in path.times.iter().zip(&path.states) {
            for (name, v) in names.iter().zip(z.coeffs().iter()) {
                w.write_record([p.to_string(), t.to_string(), name.clone(), format!("{v:e}")])?;
            }
        }
    }
    w.flush()?;
    note(cli, format!("{} OU paths, noise rank {}", paths.len(), dec.rank()));
    Ok(())
}

fn compare(cli: &Cli, spec: &ExperimentSpec) -> Result<()> {
    let dir: &Path = cli
        .out
        .as_deref()
        .or(spec.output_dir.as_deref())
        .unwrap_or(Path::new("out"));
    let outcome = run_experiment(spec)?;
    write_outcome(dir, &outcome)?;
    if !cli.quiet {
        for e in &outcome.report.entries {
            eprintln!(
                "t = {}: {}",
                e.log_time,
                if e.pass.all { "pass" } else { "FAIL" }
            );
        }
        if outcome.report.partial {
            eprintln!("partial: {}", outcome.report.failures.join("; "));
        }
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}
