//! The deterministic semiflow `μ̇ = −μ + Π(μ)` and Monte Carlo paths of the
//! self-interacting diffusion
//! `dX_s = dB_s − ½∂_θ(Vμ_s)(X_s) ds`, `μ_s = (w₀ μ_init + ∫_{s₀}^s δ_{X_u} du)/(w₀ + s − s₀)`.

use std::f64::consts::TAU;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::{basis_len, derivative, eval_basis_into, synthesize, SpectralFunction};
use crate::error::{Error, Result};
use crate::kernels::{pi_map, v_mu, xi, InteractionKernel};
use crate::measure::{check_truncation, eval_grid, ProbMeasure, SignedMeasure};
use crate::seed::rng_from_seed;

/// Grid values of the flowed density below this abort the flow.
pub const FLOW_NEGATIVITY_TOL: f64 = 1e-6;

/// Largest `μ*` residual accepted by [`run_path`].
pub const MAX_EQUILIBRIUM_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OdeState {
    pub mu: ProbMeasure,
    pub time: f64,
}

fn flow_field(kernel: &InteractionKernel, rho: &DVector<f64>) -> Result<DVector<f64>> {
    let m = SignedMeasure::new(SpectralFunction::from_vector(rho.clone()));
    let image = xi(&v_mu(kernel, &m)?);
    Ok(image.density().coeffs() - rho)
}

/// Classical RK4 on the density coefficients; the last step is shortened to
/// land on `horizon`. Returns the initial state and every step.
pub fn ode_flow(
    kernel: &InteractionKernel,
    start: &ProbMeasure,
    horizon: f64,
    dt: f64,
) -> Result<Vec<OdeState>> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "flow needs dt > 0 and horizon >= 0 (got dt = {dt}, horizon = {horizon})"
        )));
    }
    check_truncation(kernel.truncation(), start.truncation())?;
    let grid = eval_grid(start.truncation());
    let mut rho = start.density().coeffs().clone();
    let mut t = 0.0;
    let mut out = vec![OdeState {
        mu: start.clone(),
        time: 0.0,
    }];
    let full = (horizon / dt).floor() as usize;
    let rest = horizon - full as f64 * dt;
    let steps = (0..full).map(|_| dt).chain((rest > 1e-12 * dt).then_some(rest));
    for h in steps {
        let k1 = flow_field(kernel, &rho)?;
        let k2 = flow_field(kernel, &(&rho + &k1 * (h / 2.0)))?;
        let k3 = flow_field(kernel, &(&rho + &k2 * (h / 2.0)))?;
        let k4 = flow_field(kernel, &(&rho + &k3 * h))?;
        rho += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        rho[0] = 1.0;
        t += h;
        let density = SpectralFunction::from_vector(rho.clone());
        let min = synthesize(&density, grid).into_iter().fold(f64::INFINITY, f64::min);
        if min < -FLOW_NEGATIVITY_TOL {
            return Err(Error::InvalidMeasure(format!(
                "flowed density reaches {min:e} at t = {t}; truncation too coarse for this kernel"
            )));
        }
        out.push(OdeState {
            mu: ProbMeasure::from_normalized(density),
            time: t,
        });
    }
    Ok(out)
}

/// `θ ↦ −½ ∂_θ(Vμ)(θ)` as a sparse bilinear form in `(e(θ), ρ)`.
#[derive(Debug, Clone)]
pub struct DriftField {
    truncation: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl DriftField {
    pub fn new(kernel: &InteractionKernel) -> Self {
        let k = kernel.truncation();
        let n = basis_len(k);
        let v = kernel.matrix();
        let mut entries = Vec::new();
        for col in 0..n {
            let vcol = SpectralFunction::from_vector(v.column(col).into_owned());
            let d = derivative(&vcol);
            for (row, c) in d.coeffs().iter().enumerate() {
                if *c != 0.0 {
                    entries.push((row, col, -0.5 * c));
                }
            }
        }
        Self { truncation: k, entries }
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    /// Drift at the point whose basis values are `e`, for density `ρ`.
    pub fn eval(&self, e: &[f64], rho: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, j, c)| c * e[i] * rho[j]).sum()
    }

    fn eval_scaled(&self, e: &[f64], occupation: &[f64], inv_weight: f64) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, c)| c * e[i] * occupation[j])
            .sum::<f64>()
            * inv_weight
    }
}

/// One path: position, clock time and raw occupation integrals.
#[derive(Debug, Clone)]
pub struct PathState {
    pub position: f64,
    pub clock: f64,
    /// `I_α(s) = w₀ init_α + ∫_{s₀}^s e_α(X_u) du`.
    pub occupation: Vec<f64>,
    s0: f64,
    w0: f64,
    basis_at_position: Vec<f64>,
    rng: ChaCha8Rng,
}

impl PathState {
    pub fn new(init: &ProbMeasure, s0: f64, w0: f64, position: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(w0 > 0.0) || !s0.is_finite() {
            return Err(Error::InvalidInput(format!(
                "warm start needs w0 > 0 and finite s0 (got w0 = {w0}, s0 = {s0})"
            )));
        }
        let k = init.truncation();
        let occupation: Vec<f64> = init.density().coeffs().iter().map(|c| c * w0).collect();
        let position = position.rem_euclid(TAU);
        let mut basis_at_position = vec![0.0; basis_len(k)];
        eval_basis_into(position, &mut basis_at_position);
        Ok(Self {
            position,
            clock: s0,
            occupation,
            s0,
            w0,
            basis_at_position,
            rng,
        })
    }

    pub fn truncation(&self) -> usize {
        (self.occupation.len() - 1) / 2
    }

    /// Total occupation weight `w₀ + s − s₀`.
    pub fn weight(&self) -> f64 {
        self.w0 + self.clock - self.s0
    }

    /// Density coefficients of `μ_s`.
    pub fn density(&self) -> SpectralFunction {
        let w = self.weight();
        SpectralFunction::from_vector(DVector::from_iterator(
            self.occupation.len(),
            self.occupation.iter().map(|v| v / w),
        ))
    }

    /// Euler–Maruyama step with the trapezoid occupation update.
    pub fn step(&mut self, drift: &DriftField, dt: f64) {
        let b = drift.eval_scaled(&self.basis_at_position, &self.occupation, 1.0 / self.weight());
        let z: f64 = self.rng.sample(StandardNormal);
        let next = (self.position + b * dt + dt.sqrt() * z).rem_euclid(TAU);
        let old = std::mem::replace(&mut self.basis_at_position, vec![0.0; self.occupation.len()]);
        eval_basis_into(next, &mut self.basis_at_position);
        let half = 0.5 * dt;
        for ((i, a), b) in self.occupation.iter_mut().zip(&old).zip(&self.basis_at_position) {
            *i += half * (a + b);
        }
        self.position = next;
        self.clock += dt;
    }
}

/// A copy of `state` advanced by one step under `kernel`.
pub fn sde_step(state: &PathState, kernel: &InteractionKernel, dt: f64) -> Result<PathState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt = {dt} must be positive")));
    }
    check_truncation(kernel.truncation(), state.truncation())?;
    let mut next = state.clone();
    next.step(&DriftField::new(kernel), dt);
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub mu_star: ProbMeasure,
    pub log_times: Vec<f64>,
    pub dt: f64,
    pub s0: f64,
    pub w0: f64,
    pub init: ProbMeasure,
    pub test_functions: Vec<SpectralFunction>,
}

impl SimConfig {
    pub fn new(mu_star: ProbMeasure, log_times: Vec<f64>, test_functions: Vec<SpectralFunction>) -> Self {
        let k = mu_star.truncation();
        Self {
            mu_star,
            log_times,
            dt: 1e-3,
            s0: 1.0,
            w0: 1.0,
            init: ProbMeasure::uniform(k),
            test_functions,
        }
    }

    fn validate(&self, kernel: &InteractionKernel) -> Result<()> {
        let k = kernel.truncation();
        check_truncation(k, self.mu_star.truncation())?;
        check_truncation(k, self.init.truncation())?;
        for g in &self.test_functions {
            check_truncation(k, g.truncation())?;
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt = {} must be positive", self.dt)));
        }
        if self.log_times.is_empty() || self.log_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("log times must be nonempty and increasing".into()));
        }
        if self.log_times[0].exp() <= self.s0 {
            return Err(Error::InvalidInput(format!(
                "first sample time e^{} does not exceed the warm-start clock {}",
                self.log_times[0], self.s0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FluctuationSample {
    pub log_time: f64,
    /// `Δ_t = e^{t/2}(μ_{e^t} − μ*)`.
    pub delta: SignedMeasure,
    /// `D_t = VΔ_t`.
    pub d_function: SpectralFunction,
    /// `Δ_t g_i`.
    pub delta_g: Vec<f64>,
}

/// Refuses when `μ*` is not a fixed point of `Π` to within `1e−8`.
pub fn check_equilibrium(kernel: &InteractionKernel, mu_star: &ProbMeasure) -> Result<f64> {
    let residual = mu_star.distance(&pi_map(kernel, mu_star)?);
    if !(residual <= MAX_EQUILIBRIUM_RESIDUAL) {
        return Err(Error::Refused(format!(
            "mu* residual {residual:e} exceeds {MAX_EQUILIBRIUM_RESIDUAL:e}"
        )));
    }
    Ok(residual)
}

fn initial_position(init: &ProbMeasure, rng: &mut ChaCha8Rng) -> f64 {
    let density = init.density();
    let top = synthesize(density, eval_grid(init.truncation()))
        .into_iter()
        .fold(0.0, f64::max)
        * 1.01;
    loop {
        let x = rng.random::<f64>() * TAU;
        if rng.random::<f64>() * top <= density.eval(x) {
            return x;
        }
    }
}

/// One replication, sampled at `s = e^{t_j}`.
pub fn run_path(kernel: &InteractionKernel, config: &SimConfig, seed: u64) -> Result<Vec<FluctuationSample>> {
    config.validate(kernel)?;
    check_equilibrium(kernel, &config.mu_star)?;
    let drift = DriftField::new(kernel);
    let mut rng = rng_from_seed(seed);
    let x0 = initial_position(&config.init, &mut rng);
    let mut state = PathState::new(&config.init, config.s0, config.w0, x0, rng)?;
    let mut out = Vec::with_capacity(config.log_times.len());
    for &t in &config.log_times {
        let target = t.exp();
        let full = ((target - state.clock) / config.dt).floor() as usize;
        for _ in 0..full {
            state.step(&drift, config.dt);
        }
        let rest = target - state.clock;
        if rest > 1e-12 * target {
            state.step(&drift, rest);
        }
        let density = state.density();
        let delta = density.sub(config.mu_star.density()).scale((t / 2.0).exp());
        let d_function = SpectralFunction::from_vector(kernel.matrix() * delta.coeffs());
        let delta_g = config.test_functions.iter().map(|g| delta.dot(g)).collect();
        out.push(FluctuationSample {
            log_time: t,
            delta: SignedMeasure::new(delta),
            d_function,
            delta_g,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisIndex;
    use crate::kernels::{fix_pi_solve, FixPointOptions};
    use std::f64::consts::FRAC_PI_4;

    fn cos1() -> usize {
        BasisIndex::Cos(1).position()
    }

    fn a1(k: usize, a: f64) -> InteractionKernel {
        InteractionKernel::from_multipliers(k, &[(1, a)]).unwrap()
    }

    fn random_start(k: usize, seed: u64) -> ProbMeasure {
        let mut rng = rng_from_seed(seed);
        let mut c = vec![0.0; basis_len(k)];
        c[0] = 1.0;
        for v in c.iter_mut().skip(1).take(4) {
            *v = rng.random_range(-0.2..0.2);
        }
        ProbMeasure::from_density(SpectralFunction::from_coeffs(c).unwrap()).unwrap()
    }

    #[test]
    fn flow_without_interaction_is_linear() {
        let k = 4;
        let start = random_start(k, 1);
        let gap0 = start.distance(&ProbMeasure::uniform(k));
        let states = ode_flow(&InteractionKernel::zero(k), &start, 5.0, 0.01).unwrap();
        for s in states.iter().step_by(50) {
            let gap = s.mu.distance(&ProbMeasure::uniform(k));
            assert!(gap <= (-s.time).exp() * gap0 * (1.0 + 1e-6) + 1e-15);
        }
        assert!((states.last().unwrap().time - 5.0).abs() < 1e-12);
    }

    #[test]
    fn flow_reaches_the_unique_fixed_point() {
        let k = 4;
        let kernel = a1(k, 1.0);
        let limits: Vec<ProbMeasure> = (0..5)
            .map(|seed| {
                let st = ode_flow(&kernel, &random_start(k, 10 + seed), 40.0, 0.05).unwrap();
                st.last().unwrap().mu.clone()
            })
            .collect();
        for mu in &limits {
            assert!(mu.distance(&pi_map(&kernel, mu).unwrap()) <= 1e-8);
        }
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(limits[i].distance(&limits[j]) <= 1e-7);
            }
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let k = 4;
        let kernel = InteractionKernel::diffusion(SpectralFunction::basis(k, BasisIndex::Cos(1)).scale(0.8));
        let fp = fix_pi_solve(&kernel, &ProbMeasure::uniform(k), FixPointOptions::default()).unwrap();
        let st = ode_flow(&kernel, &fp.measure, 10.0, 0.05).unwrap();
        for s in &st {
            assert!(s.mu.distance(&fp.measure) <= 1e-9);
        }
    }

    #[test]
    fn flow_rejects_bad_step() {
        let k = 2;
        assert!(ode_flow(&InteractionKernel::zero(k), &ProbMeasure::uniform(k), 1.0, 0.0).is_err());
    }

    #[test]
    fn driftless_increments_are_brownian() {
        let k = 2;
        let kernel = InteractionKernel::zero(k);
        let drift = DriftField::new(&kernel);
        let mut st = PathState::new(&ProbMeasure::uniform(k), 1.0, 1.0, 0.0, rng_from_seed(3)).unwrap();
        let mut incr = Vec::new();
        for _ in 0..10_000 {
            let before = st.position;
            st.step(&drift, 1e-3);
            let mut d = st.position - before;
            if d > std::f64::consts::PI {
                d -= TAU;
            } else if d < -std::f64::consts::PI {
                d += TAU;
            }
            incr.push(d);
        }
        let total: f64 = incr.iter().map(|d| d * d).sum();
        assert!((total - 10.0).abs() < 0.5, "{total}");
        assert!((st.density().mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn drift_is_self_repelling() {
        let k = 3;
        let kernel = a1(k, 1.0);
        let drift = DriftField::new(&kernel);
        let rho = SpectralFunction::constant(k, 1.0).add(&SpectralFunction::basis(k, BasisIndex::Cos(1)).scale(0.9));
        let at = |x: f64| drift.eval(&crate::basis::eval_basis(x, k), rho.coeffs().as_slice());
        assert!(at(0.0).abs() < 1e-15);
        // −½ ∂_θ(0.9√2 cos θ) = 0.45√2 sin θ
        assert!((at(FRAC_PI_4) - 0.45).abs() < 1e-14);
        assert!(at(-FRAC_PI_4) < 0.0);

        let st = PathState::new(&ProbMeasure::uniform(k), 1.0, 1.0, FRAC_PI_4, rng_from_seed(0)).unwrap();
        let next = sde_step(&st, &kernel, 1e-3).unwrap();
        assert!((next.clock - 1.001).abs() < 1e-15);
    }

    #[test]
    fn occupation_mass_is_exact() {
        let k = 3;
        let kernel = a1(k, 1.0);
        let drift = DriftField::new(&kernel);
        let mut st = PathState::new(&ProbMeasure::uniform(k), 1.0, 1.0, 2.0, rng_from_seed(5)).unwrap();
        for i in 0..5000 {
            st.step(&drift, if i % 7 == 0 { 3e-4 } else { 1e-3 });
            assert!((st.density().mean() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn run_path_records_each_log_time() {
        let k = 2;
        let kernel = a1(k, 1.0);
        let g = vec![SpectralFunction::basis(k, BasisIndex::Cos(1))];
        let mut cfg = SimConfig::new(ProbMeasure::uniform(k), vec![1.0, 2.0], g);
        cfg.dt = 3e-3;
        let a = run_path(&kernel, &cfg, 77).unwrap();
        let b = run_path(&kernel, &cfg, 77).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.delta_g, y.delta_g);
            assert_eq!(x.delta.density(), y.delta.density());
            assert_eq!(x.delta.density().coeff(BasisIndex::Constant), 0.0);
            assert!((x.delta_g[0] - x.delta.density().coeffs()[cos1()]).abs() < 1e-15);
            // D = VΔ for a_1 = 1 is the first-mode part of Δ
            assert!((x.d_function.coeffs()[cos1()] - x.delta_g[0]).abs() < 1e-15);
        }
        let c = run_path(&kernel, &cfg, 78).unwrap();
        assert_ne!(a[1].delta_g, c[1].delta_g);
    }

    #[test]
    fn run_path_refuses_off_equilibrium() {
        let k = 2;
        let kernel = a1(k, 1.0);
        let off = random_start(k, 4);
        let cfg = SimConfig::new(off, vec![1.0], vec![]);
        assert!(run_path(&kernel, &cfg, 1).unwrap_err().is_refusal());
        let mut cfg = SimConfig::new(ProbMeasure::uniform(k), vec![0.0], vec![]);
        assert!(matches!(run_path(&kernel, &cfg, 1), Err(Error::InvalidInput(_))));
        cfg.log_times = vec![2.0, 1.0];
        assert!(run_path(&kernel, &cfg, 1).is_err());
    }

    #[test]
    fn zero_kernel_fluctuations_are_centered() {
        let k = 2;
        let kernel = InteractionKernel::zero(k);
        let g = vec![SpectralFunction::basis(k, BasisIndex::Cos(1))];
        let mut cfg = SimConfig::new(ProbMeasure::uniform(k), vec![3.0], g);
        cfg.dt = 5e-3;
        let xs: Vec<f64> = (0..200)
            .map(|r| run_path(&kernel, &cfg, crate::seed::split_seed(9, r)).unwrap()[0].delta_g[0])
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * (var / n).sqrt());
    }
}
