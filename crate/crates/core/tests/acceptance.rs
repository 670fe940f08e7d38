//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use sidlab::basis::{basis_len, BasisIndex, SpectralFunction};
use sidlab::dynamics::ode_flow;
use sidlab::harness::{run_experiment, ExperimentSpec};
use sidlab::kernels::{fix_pi_solve, mercer_check, pi_map, FixPointOptions, InteractionKernel};
use sidlab::measure::{eval_grid, ProbMeasure, SignedMeasure};
use sidlab::operators::LinearResponse;
use sidlab::ou::{
    closed_form_diffusion, closed_form_symmetric, joint_var, limit_covariance,
    mercer_of_response, ou_variance, stationary_var, OuSolver,
};
use sidlab::seed::rng_from_seed;
use sidlab::stats::{ks_normal, variance, variance_se};

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ti(k: usize, modes: &[(usize, f64)]) -> InteractionKernel {
    InteractionKernel::from_multipliers(k, modes).unwrap()
}

fn diffusion(k: usize, v1: f64) -> InteractionKernel {
    InteractionKernel::diffusion(SpectralFunction::basis(k, BasisIndex::Cos(1)).scale(v1))
}

fn general(k: usize) -> InteractionKernel {
    let n = basis_len(k);
    let mut m = DMatrix::zeros(n, n);
    m[(1, 1)] = 1.0;
    m[(2, 2)] = 0.6;
    m[(3, 3)] = 0.3;
    m[(1, 3)] = 0.2;
    m[(3, 1)] = 0.2;
    m[(0, 1)] = 0.5;
    m[(1, 0)] = 0.5;
    InteractionKernel::general(m).unwrap()
}

fn equilibrium(kernel: &InteractionKernel) -> ProbMeasure {
    let start = ProbMeasure::uniform(kernel.truncation());
    fix_pi_solve(kernel, &start, FixPointOptions::default()).unwrap().measure
}

fn basis(k: usize, idx: BasisIndex) -> SpectralFunction {
    SpectralFunction::basis(k, idx)
}

fn random_function(k: usize, degree: usize, rng: &mut impl Rng) -> SpectralFunction {
    let mut c = vec![0.0; basis_len(k)];
    for v in c.iter_mut().take(basis_len(degree)) {
        *v = rng.random_range(-1.0..1.0);
    }
    SpectralFunction::from_coeffs(c).unwrap()
}

fn operator_identities() -> Outcome {
    let k = 16;
    let kernels = [
        ("V=0", InteractionKernel::zero(k)),
        ("a1=1", ti(k, &[(1, 1.0)])),
        ("a1=1,a2=0.5", ti(k, &[(1, 1.0), (2, 0.5)])),
        ("v=0.8c1", diffusion(k, 0.8)),
    ];
    let mut rng = rng_from_seed(101);
    let mut worst_poisson: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    for (_, kernel) in &kernels {
        let mu = equilibrium(kernel);
        let resp = LinearResponse::new(&mu, kernel).unwrap();
        for _ in 0..50 {
            let f = random_function(k, k / 2, &mut rng);
            let qf = resp.q.apply(&f);
            let res = resp
                .a
                .apply(&qf)
                .add(&f)
                .sub(&SpectralFunction::constant(k, resp.pi.pair(&f)));
            worst_poisson = worst_poisson.max(res.sup_norm(eval_grid(k)));
            worst_mean = worst_mean.max(resp.pi.pair(&qf).abs());
        }
    }
    outcome(
        worst_poisson <= 1e-8 && worst_mean <= 1e-10,
        format!("max |AQf + f - Pi f| = {worst_poisson:.2e}, max |Pi(Qf)| = {worst_mean:.2e}"),
    )
}

fn closed_form_covariance() -> Outcome {
    let k = 6;
    let gs = [
        basis(k, BasisIndex::Cos(1)),
        basis(k, BasisIndex::Sin(1)),
        basis(k, BasisIndex::Cos(2)),
    ];
    let lambda = ProbMeasure::uniform(k);
    let mut kernels: Vec<(String, InteractionKernel)> = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .map(|a| (format!("a1={a}"), ti(k, &[(1, *a)])))
        .collect();
    kernels.push(("a1=1,a2=0.5".into(), ti(k, &[(1, 1.0), (2, 0.5)])));
    let mut worst: f64 = 0.0;
    for (_, kernel) in &kernels {
        let spectrum = mercer_check(kernel).unwrap().spectrum;
        for f in &gs {
            for g in &gs {
                let quad = limit_covariance(&lambda, kernel, f, g).unwrap();
                let closed = closed_form_symmetric(&spectrum, f, g).unwrap();
                let zero = SignedMeasure::zero(k);
                let jv = if f == g {
                    joint_var(&lambda, kernel, &[1.0], &zero, std::slice::from_ref(f)).unwrap()
                } else {
                    // polarization: Ĉ(f,g) = (Var(f+g) − Var(f−g))/4
                    let both = [f.clone(), g.clone()];
                    let plus = joint_var(&lambda, kernel, &[1.0, 1.0], &zero, &both).unwrap();
                    let minus = joint_var(&lambda, kernel, &[1.0, -1.0], &zero, &both).unwrap();
                    (plus - minus) / 4.0
                };
                worst = worst.max((quad - closed).abs()).max((jv - closed).abs());
            }
        }
    }
    let c1 = basis(k, BasisIndex::Cos(1));
    let mut exact_err: f64 = 0.0;
    for a in [0.0, 0.5, 1.0, 2.0] {
        let kernel = ti(k, &[(1, a)]);
        let expected = 4.0 / (1.0 + 2.0 * a);
        let spectrum = mercer_check(&kernel).unwrap().spectrum;
        let closed = closed_form_symmetric(&spectrum, &c1, &c1).unwrap();
        let quad = limit_covariance(&lambda, &kernel, &c1, &c1).unwrap();
        exact_err = exact_err
            .max((closed - expected).abs())
            .max((quad - expected).abs());
    }
    outcome(
        worst <= 1e-6 && exact_err <= 1e-9,
        format!("max method disagreement {worst:.2e}, max |C(c1,c1) - 4/(1+2a1)| = {exact_err:.2e}"),
    )
}

fn repulsion_monotonicity() -> Outcome {
    let k = 4;
    let lambda = ProbMeasure::uniform(k);
    let c1 = basis(k, BasisIndex::Cos(1));
    let values: Vec<f64> = (0..20)
        .map(|i| {
            let a = 3.0 * i as f64 / 19.0;
            limit_covariance(&lambda, &ti(k, &[(1, a)]), &c1, &c1).unwrap()
        })
        .collect();
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    outcome(
        decreasing,
        format!("C(c1,c1) from {:.4} at a1=0 to {:.4} at a1=3", values[0], values[19]),
    )
}

fn diffusion_specialization() -> Outcome {
    let k = 12;
    let kernel = diffusion(k, 0.8);
    let mu = equilibrium(&kernel);
    let gs = [
        basis(k, BasisIndex::Cos(1)),
        basis(k, BasisIndex::Sin(1)),
        basis(k, BasisIndex::Cos(2)),
    ];
    let mut worst: f64 = 0.0;
    for f in &gs {
        for g in &gs {
            let quad = limit_covariance(&mu, &kernel, f, g).unwrap();
            let closed = closed_form_diffusion(&mu, &kernel, f, g).unwrap();
            worst = worst.max((quad - closed).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max |quadrature - 2mu*(f Q g)| = {worst:.2e}"))
}

fn ou_stationary_law() -> Outcome {
    let k = 3;
    let kernels = [("a1=1,a2=0.5", ti(k, &[(1, 1.0), (2, 0.5)])), ("general", general(k))];
    let functionals = [
        basis(k, BasisIndex::Cos(1)),
        basis(k, BasisIndex::Sin(1)).add(&basis(k, BasisIndex::Cos(2)).scale(0.5)),
        SpectralFunction::from_coeffs(vec![0.0, 0.3, -0.7, 0.2, 0.4, -0.1, 0.5]).unwrap(),
    ];
    let samples = 100_000;
    let mut worst_z: f64 = 0.0;
    let mut checks = 0;
    let mut failed = 0;
    for (seed, (_, kernel)) in kernels.iter().enumerate() {
        let mu = equilibrium(kernel);
        let resp = LinearResponse::new(&mu, kernel).unwrap();
        let dec = mercer_of_response(&resp, 1e-12).unwrap();
        let c = dec.coefficient_covariance();
        let mut judge = |xs: &[f64], target: f64| {
            let z = (variance(xs) - target).abs() / variance_se(xs);
            worst_z = worst_z.max(z);
            checks += 1;
            if z > 3.0 {
                failed += 1;
            }
        };

        // long run, large steps: consecutive states are nearly independent
        let mut solver = OuSolver::new(&resp.g, &dec).unwrap();
        let mut rng = rng_from_seed(500 + seed as u64);
        let mut z = DVector::zeros(basis_len(k));
        let mut series = vec![Vec::with_capacity(samples); functionals.len()];
        for i in 0..samples + 20 {
            z = solver.step(&z, 12.0, &mut rng).unwrap();
            if i >= 20 {
                for (s, m) in series.iter_mut().zip(&functionals) {
                    s.push(m.coeffs().dot(&z));
                }
            }
        }
        for (s, m) in series.iter().zip(&functionals) {
            let target = stationary_var(&mu, kernel, &SignedMeasure::new(m.clone())).unwrap();
            judge(s, target);
        }

        // finite time from Z_0 = 0
        let times = [0.0, 0.5, 1.0, 2.0];
        let mut finite = vec![vec![Vec::with_capacity(samples); functionals.len()]; 3];
        let mut rng = rng_from_seed(900 + seed as u64);
        let zero = SpectralFunction::zeros(k);
        for _ in 0..samples {
            let path = solver.solve(&zero, &times, &mut rng).unwrap();
            for (ti, state) in path.states[1..].iter().enumerate() {
                for (fi, m) in functionals.iter().enumerate() {
                    finite[ti][fi].push(m.coeffs().dot(state.coeffs()));
                }
            }
        }
        for (ti, t) in times[1..].iter().enumerate() {
            for (fi, m) in functionals.iter().enumerate() {
                let target = ou_variance(resp.g.matrix(), &c, m.coeffs(), *t).unwrap();
                judge(&finite[ti][fi], target);
            }
        }
    }
    outcome(
        failed == 0,
        format!("{checks} variance checks, {failed} outside 3 SE, max |z| = {worst_z:.2}"),
    )
}

fn full_loop_clt() -> Outcome {
    let spec = ExperimentSpec::from_json(
        r#"{
            "kernel": {"type": "translation_invariant", "a": {"1": 1.0}},
            "truncation": 4,
            "dt": 0.001,
            "log_times": [6.0],
            "test_functions": ["cos1", "sin1"],
            "replications": 400,
            "master_seed": 20240601
        }"#,
    )
    .unwrap();
    let out = run_experiment(&spec).unwrap();
    let e = &out.report.entries[0];
    let predicted = e.predicted_cov[0][0];
    let inside = e.bootstrap_ci.contains(0, 0, predicted);
    let p = e.normality_p_values[0];
    let xs: Vec<f64> = out.replications.iter().map(|r| r.samples[0].delta_g[0]).collect();
    let ks = ks_normal(&xs, predicted).unwrap();
    outcome(
        inside && p >= 0.01 && (ks.p_value - p).abs() < 1e-12,
        format!(
            "Var(c1) = {:.4}, 95% CI [{:.4}, {:.4}], predicted {:.6}, KS p = {:.3}",
            e.empirical_cov[0][0],
            e.bootstrap_ci.lower[0][0],
            e.bootstrap_ci.upper[0][0],
            predicted,
            p
        ),
    )
}

fn semiflow_convergence() -> Outcome {
    let k = 4;
    let kernel = ti(k, &[(1, 1.0)]);
    let mut rng = rng_from_seed(77);
    let mut limits = Vec::new();
    let mut worst_residual: f64 = 0.0;
    for _ in 0..5 {
        let mut c = vec![0.0; basis_len(k)];
        c[0] = 1.0;
        for v in c.iter_mut().skip(1) {
            *v = rng.random_range(-0.08..0.08);
        }
        let start = ProbMeasure::from_density(SpectralFunction::from_coeffs(c).unwrap()).unwrap();
        let states = ode_flow(&kernel, &start, 40.0, 0.05).unwrap();
        let last = states.last().unwrap().mu.clone();
        worst_residual = worst_residual.max(last.distance(&pi_map(&kernel, &last).unwrap()));
        limits.push(last);
    }
    let mut spread: f64 = 0.0;
    for i in 0..limits.len() {
        for j in i + 1..limits.len() {
            spread = spread.max(limits[i].distance(&limits[j]));
        }
    }
    outcome(
        worst_residual <= 1e-8 && spread <= 1e-7,
        format!("max residual {worst_residual:.2e}, max pairwise distance {spread:.2e}"),
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn hypothesis_gate(dir: &Path) -> Outcome {
    let k = 4;
    let lambda = ProbMeasure::uniform(k);
    let kappa = |kernel: &InteractionKernel| LinearResponse::new(&lambda, kernel).unwrap().diagnostics.kappa;
    let k0 = kappa(&InteractionKernel::zero(k));
    let k04 = kappa(&ti(k, &[(1, -0.4)]));
    let config = write_config(
        dir,
        "repelling_too_weak.json",
        r#"{"kernel": {"type": "translation_invariant", "a": {"1": -0.6}}, "truncation": 4,
            "test_functions": ["cos1", "sin1"]}"#,
    );
    let status = Command::new(env!("CARGO_BIN_EXE_sidlab"))
        .args(["predict", "--quiet", "--config"])
        .arg(&config)
        .output()
        .unwrap()
        .status;
    outcome(
        (k0 - 0.5).abs() < 1e-12 && (k04 - 0.1).abs() < 1e-12 && status.code() == Some(2),
        format!("kappa(V=0) = {k0}, kappa(a1=-0.4) = {k04:.12}, predict a1=-0.6 exits {:?}", status.code()),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let config = write_config(
        dir,
        "det.json",
        r#"{"kernel": {"type": "translation_invariant", "a": {"1": 1.0, "2": 0.5}}, "truncation": 3,
            "dt": 0.002, "log_times": [1.5, 2.5], "test_functions": ["cos1", "sin1", "cos2"],
            "replications": 24, "master_seed": 99, "bootstrap_resamples": 300}"#,
    );
    let run = |out: &str, threads: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_sidlab"))
            .args(["compare", "--quiet", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.join(out))
            .env("SIDLAB_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run("a", "1");
    run("b", "4");
    let mut same = true;
    for name in ["report.json", "report.csv", "samples.csv"] {
        same &= fs::read(dir.join("a").join(name)).unwrap() == fs::read(dir.join("b").join(name)).unwrap();
    }
    let manifest = |d: &str| {
        let mut v: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join(d).join("manifest.json")).unwrap()).unwrap();
        let obj = v.as_object_mut().unwrap();
        for key in ["startedAt", "finishedAt", "threads"] {
            obj.remove(key);
        }
        v
    };
    same &= manifest("a") == manifest("b");
    outcome(
        same,
        "two compare runs (1 and 4 threads): report and sample files byte-identical, manifests equal apart from timestamps and thread count",
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("operator identities", Box::new(operator_identities)),
        ("closed-form covariance", Box::new(closed_form_covariance)),
        ("repulsion monotonicity", Box::new(repulsion_monotonicity)),
        ("diffusion specialization", Box::new(diffusion_specialization)),
        ("OU stationary law", Box::new(ou_stationary_law)),
        ("full-loop CLT", Box::new(full_loop_clt)),
        ("semiflow convergence", Box::new(semiflow_convergence)),
        ("hypothesis gate", Box::new(|| hypothesis_gate(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {} {name}: {} ({}; {secs:.1} s)",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failures += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
