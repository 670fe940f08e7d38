//! Gaussian limit objects: the Mercer expansion of `C_μ`, Brownian motion
//! with that covariance, the Ornstein–Uhlenbeck process `dZ = −G Z dt + dW`,
//! and the limit covariance `Ĉ(f, g)` with its closed forms.
//!
//! The variance integrals follow the flow of
//! `f_t = e^{−t/2} u + Vᵀ m_t`, `m_t' = −G* m_t − Cov_μ-density(e^{−t/2} u)`.
//! With `u = 0` it is `m_t = e^{−tG*} m`; with `m = 0` it yields `f_t` of the
//! limit covariance.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{analyze, basis_len, BasisIndex, SpectralFunction};
use crate::error::{Error, Result};
use crate::kernels::{InteractionKernel, KernelForm, KernelSpectrum};
use crate::measure::{check_truncation, eval_grid, ProbMeasure, SignedMeasure};
use crate::operators::{c_kernel_on_grid, LinearResponse, OperatorMatrix, Semigroup};
use crate::quadrature::{horizon, integrate_flow, log_panels, DEFAULT_REL_TOL};
use crate::seed::rng_from_seed;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;
pub const DEFAULT_MERCER_TOL: f64 = 1e-12;
/// Integrand magnitudes below this fraction of their a priori scale are
/// rounding noise.
const NOISE_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct MercerPair {
    pub sigma: f64,
    /// `√σ` times the unit eigenfunction.
    pub psi: SpectralFunction,
}

#[derive(Debug, Clone)]
pub struct MercerDecomposition {
    pub truncation: usize,
    pub pairs: Vec<MercerPair>,
}

impl MercerDecomposition {
    pub fn empty(k: usize) -> Self {
        Self {
            truncation: k,
            pairs: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Columns are the coefficient vectors of `Ψ_i`.
    pub fn factor(&self) -> DMatrix<f64> {
        let n = basis_len(self.truncation);
        let mut out = DMatrix::zeros(n, self.rank());
        for (i, p) in self.pairs.iter().enumerate() {
            out.set_column(i, p.psi.coeffs());
        }
        out
    }

    /// Coefficients of `Σ_i Ψ_i(x) Ψ_i(y)`.
    pub fn coefficient_covariance(&self) -> DMatrix<f64> {
        let f = self.factor();
        &f * f.transpose()
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.pairs.iter().map(|p| p.psi.eval(x) * p.psi.eval(y)).sum()
    }
}

/// Eigendecomposition of a kernel sampled on the uniform grid, with the
/// λ-weighted inner product `⟨u, v⟩ = (1/N) Σ u_i v_i`.
pub fn mercer_decompose(c: &DMatrix<f64>, k: usize, rel_tol: f64) -> Result<MercerDecomposition> {
    if !c.is_square() {
        return Err(Error::InvalidInput("kernel matrix must be square".into()));
    }
    let n = c.nrows();
    let asym = (c - c.transpose()).amax();
    if asym > SYMMETRY_TOL * c.amax().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "kernel matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new((c + c.transpose()) * (0.5 / n as f64));
    let sigma0 = eig.eigenvalues.max().max(0.0);
    let floor = -PSD_TOL * sigma0.max(1.0);
    if eig.eigenvalues.min() < floor {
        return Err(Error::InvalidInput(format!(
            "kernel matrix has eigenvalue {:e}",
            eig.eigenvalues.min()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut pairs = Vec::new();
    for i in order {
        let sigma = eig.eigenvalues[i];
        if sigma0 == 0.0 || sigma < rel_tol * sigma0 {
            break;
        }
        let values: Vec<f64> = eig
            .eigenvectors
            .column(i)
            .iter()
            .map(|v| v * (sigma * n as f64).sqrt())
            .collect();
        pairs.push(MercerPair {
            sigma,
            psi: analyze(&values, k)?,
        });
    }
    Ok(MercerDecomposition {
        truncation: k,
        pairs,
    })
}

/// Mercer expansion of `C_μ` sampled on the evaluation grid.
pub fn mercer_of_response(resp: &LinearResponse, rel_tol: f64) -> Result<MercerDecomposition> {
    let k = resp.truncation();
    mercer_decompose(&c_kernel_on_grid(resp, eval_grid(k)), k, rel_tol)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "times must be nonnegative and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `W_t = Σ_i B^i_t Ψ_i` at the given times, with `W_0 = 0`.
pub fn brownian_sample(
    dec: &MercerDecomposition,
    times: &[f64],
    seed: u64,
) -> Result<Vec<SpectralFunction>> {
    check_times(times)?;
    let mut rng = rng_from_seed(seed);
    let factor = dec.factor();
    let mut b = DVector::zeros(dec.rank());
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let sd = (t - prev).sqrt();
        for v in b.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
        prev = t;
        out.push(SpectralFunction::from_vector(&factor * &b));
    }
    Ok(out)
}

/// `∫_0^h e^{−sG} Ψ Ψᵀ e^{−sGᵀ} ds`.
pub fn noise_covariance(g: &DMatrix<f64>, factor: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    if factor.ncols() == 0 || h == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let abs_tol = NOISE_FLOOR * factor.norm_squared();
    let r = integrate_flow(&(-g), factor, &[0.0, h], DEFAULT_REL_TOL, abs_tol, |x| {
        let xx = x * x.transpose();
        DVector::from_column_slice(xx.as_slice())
    })?;
    let m = DMatrix::from_column_slice(n, n, r.value.as_slice());
    Ok((&m + m.transpose()) * 0.5)
}

/// `Var(m Z_t)` for `Z_0 = 0`: `∫_0^t (e^{−sGᵀ}m)ᵀ C (e^{−sGᵀ}m) ds`.
pub fn ou_variance(g: &DMatrix<f64>, c: &DMatrix<f64>, m: &DVector<f64>, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let z0 = DMatrix::from_column_slice(m.len(), 1, m.as_slice());
    let abs_tol = NOISE_FLOOR * c.norm() * m.norm_squared();
    let r = integrate_flow(&-g.transpose(), &z0, &breakpoints_to(t), DEFAULT_REL_TOL, abs_tol, |z| {
        let v = z.column(0);
        DVector::from_element(1, v.dot(&(c * v)))
    })?;
    Ok(r.value[0])
}

fn breakpoints_to(t: f64) -> Vec<f64> {
    let mut pts: Vec<f64> = log_panels(t).into_iter().filter(|p| *p < t).collect();
    pts.push(t);
    pts
}

#[derive(Debug, Clone)]
pub struct OUPath {
    pub times: Vec<f64>,
    pub states: Vec<SpectralFunction>,
}

/// Exact-in-law stepping `Z_{t+h} = e^{−hG}Z_t + η_h`, caching the
/// propagator and the noise factor per step size.
#[derive(Debug, Clone)]
pub struct OuSolver {
    g: DMatrix<f64>,
    factor: DMatrix<f64>,
    semigroup: Semigroup,
    cache: HashMap<u64, (DMatrix<f64>, DMatrix<f64>)>,
}

impl OuSolver {
    pub fn new(g: &OperatorMatrix, dec: &MercerDecomposition) -> Result<Self> {
        check_truncation(g.truncation(), dec.truncation)?;
        Ok(Self {
            g: g.matrix().clone(),
            factor: dec.factor(),
            semigroup: Semigroup::new(g.matrix()),
            cache: HashMap::new(),
        })
    }

    fn step_data(&mut self, h: f64) -> Result<&(DMatrix<f64>, DMatrix<f64>)> {
        let key = h.to_bits();
        if !self.cache.contains_key(&key) {
            let prop = self.semigroup.matrix(h);
            let sigma = noise_covariance(&self.g, &self.factor, h)?;
            let eig = SymmetricEigen::new(sigma);
            let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            let noise = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
            self.cache.insert(key, (prop, noise));
        }
        Ok(&self.cache[&key])
    }

    pub fn step(&mut self, z: &DVector<f64>, h: f64, rng: &mut impl Rng) -> Result<DVector<f64>> {
        let noiseless = self.factor.ncols() == 0;
        let (prop, noise) = self.step_data(h)?;
        let mut next = prop * z;
        if !noiseless {
            let xi = DVector::from_fn(noise.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            next += noise * xi;
        }
        Ok(next)
    }

    /// The path starts at `z0` at `times[0]`.
    pub fn solve(&mut self, z0: &SpectralFunction, times: &[f64], rng: &mut impl Rng) -> Result<OUPath> {
        check_times(times)?;
        check_truncation(z0.truncation(), self.factor.nrows().saturating_sub(1) / 2)?;
        let mut states = Vec::with_capacity(times.len());
        let mut z = z0.coeffs().clone();
        if !times.is_empty() {
            states.push(z0.clone());
        }
        for w in times.windows(2) {
            z = self.step(&z, w[1] - w[0], rng)?;
            states.push(SpectralFunction::from_vector(z.clone()));
        }
        Ok(OUPath {
            times: times.to_vec(),
            states,
        })
    }
}

pub fn ou_solve(
    g: &OperatorMatrix,
    dec: &MercerDecomposition,
    z0: &SpectralFunction,
    times: &[f64],
    seed: u64,
) -> Result<OUPath> {
    let mut rng = rng_from_seed(seed);
    OuSolver::new(g, dec)?.solve(z0, times, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMethod {
    Quadrature,
    ClosedFormDiffusion,
    ClosedFormSymmetric,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LimitCovariance {
    pub test_functions: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub method: CovarianceMethod,
    pub kappa: f64,
    pub horizon: Option<f64>,
}

impl LimitCovariance {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.matrix.len();
        DMatrix::from_fn(n, n, |i, j| self.matrix[i][j])
    }
}

/// Generator of the `(u, m)` flow and the readout `f = u + Vᵀm`.
fn joint_flow(resp: &LinearResponse) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = basis_len(resp.truncation());
    let rho = resp.mu.density().coeffs();
    let s = crate::basis::multiplication_matrix(resp.mu.density()) - rho * rho.transpose();
    let mut l = DMatrix::zeros(2 * n, 2 * n);
    l.view_mut((0, 0), (n, n)).fill_diagonal(-0.5);
    l.view_mut((n, 0), (n, n)).copy_from(&(-s));
    l.view_mut((n, n), (n, n)).copy_from(&(-resp.g.matrix().transpose()));
    let mut readout = DMatrix::zeros(n, 2 * n);
    readout.view_mut((0, 0), (n, n)).fill_diagonal(1.0);
    readout
        .view_mut((0, n), (n, n))
        .copy_from(&resp.kernel.matrix().transpose());
    (l, readout)
}

/// `∫_0^{T*} Ĉ_μ(f_t^i, f_t^j) dt` for the flows started at the columns of
/// `initial` (each column stacks `u` and the density of `m`).
pub fn joint_var_matrix(resp: &LinearResponse, initial: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    resp.require_hypothesis()?;
    let (l, readout) = joint_flow(resp);
    let h = resp.c_hat_symmetric();
    let t_star = horizon(resp.diagnostics.effective_rate());
    let m = initial.ncols();
    let abs_tol = NOISE_FLOOR * h.norm() * (readout.norm() * initial.norm()).powi(2);
    let r = integrate_flow(&l, initial, &log_panels(t_star), DEFAULT_REL_TOL, abs_tol, |z| {
        let f = &readout * z;
        let c = f.transpose() * &h * f;
        DVector::from_column_slice(c.as_slice())
    })?;
    let out = DMatrix::from_column_slice(m, m, r.value.as_slice());
    Ok(((&out + out.transpose()) * 0.5, t_star))
}

/// `Ĉ(g_i, g_j)` by quadrature, for all pairs; also returns the horizon.
pub fn limit_covariance_matrix(
    resp: &LinearResponse,
    gs: &[SpectralFunction],
) -> Result<(DMatrix<f64>, f64)> {
    let n = basis_len(resp.truncation());
    let mut init = DMatrix::zeros(2 * n, gs.len());
    for (i, g) in gs.iter().enumerate() {
        check_truncation(g.truncation(), resp.truncation())?;
        init.view_mut((0, i), (n, 1)).copy_from(g.coeffs());
    }
    joint_var_matrix(resp, &init)
}

/// `Ĉ(f, g) = ∫_0^∞ Ĉ_{μ*}(f_t, g_t) dt`.
pub fn limit_covariance(
    mu_star: &ProbMeasure,
    kernel: &InteractionKernel,
    f: &SpectralFunction,
    g: &SpectralFunction,
) -> Result<f64> {
    let resp = LinearResponse::new(mu_star, kernel)?;
    let (c, _) = limit_covariance_matrix(&resp, &[f.clone(), g.clone()])?;
    Ok(c[(0, 1)])
}

/// `∫_0^∞ Ĉ_μ(f_t, f_t) dt` with `f_t = e^{−t/2} Σ u_i g_i + Vᵀ m_t`.
pub fn joint_var(
    mu: &ProbMeasure,
    kernel: &InteractionKernel,
    u: &[f64],
    m: &SignedMeasure,
    g: &[SpectralFunction],
) -> Result<f64> {
    if u.len() != g.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} test functions",
            u.len(),
            g.len()
        )));
    }
    let resp = LinearResponse::new(mu, kernel)?;
    check_truncation(m.truncation(), resp.truncation())?;
    let n = basis_len(resp.truncation());
    let mut init = DMatrix::zeros(2 * n, 1);
    for (w, gi) in u.iter().zip(g) {
        check_truncation(gi.truncation(), resp.truncation())?;
        let mut col = init.view_mut((0, 0), (n, 1));
        col += gi.coeffs() * *w;
    }
    init.view_mut((n, 0), (n, 1)).copy_from(m.density().coeffs());
    Ok(joint_var_matrix(&resp, &init)?.0[(0, 0)])
}

/// Variance of `m Z_∞` for the stationary OU law:
/// `∫_0^∞ Ĉ_μ(Vᵀm_t, Vᵀm_t) dt`, `m_t = e^{−tG*} m`.
pub fn stationary_var(mu: &ProbMeasure, kernel: &InteractionKernel, m: &SignedMeasure) -> Result<f64> {
    let g: [SpectralFunction; 0] = [];
    joint_var(mu, kernel, &[], m, &g)
}

/// `λ(e_α Q_λ e_β) = (2/k²) δ_{αβ}`.
fn q_lambda(k: usize) -> DVector<f64> {
    DVector::from_fn(basis_len(k), |p, _| {
        let freq = BasisIndex::from_position(p).frequency();
        if freq == 0 {
            0.0
        } else {
            2.0 / (freq * freq) as f64
        }
    })
}

/// Double sum `2 Σ_{α,β} ⟨f,φ_α⟩⟨g,φ_β⟩ λ(φ_α Q_λ φ_β) / (1 + λ_α + λ_β)`
/// over the eigenmodes of a symmetric kernel with `μ* = λ`; the kernel's
/// null space enters with eigenvalue 0.
pub fn closed_form_symmetric(
    spectrum: &KernelSpectrum,
    f: &SpectralFunction,
    g: &SpectralFunction,
) -> Result<f64> {
    let k = spectrum.truncation;
    check_truncation(f.truncation(), k)?;
    check_truncation(g.truncation(), k)?;
    if let Some(bad) = spectrum.modes.iter().find(|m| 0.5 + m.eigenvalue <= 0.0) {
        return Err(Error::Refused(format!(
            "1/2 + lambda = {} <= 0 for mode {}",
            0.5 + bad.eigenvalue,
            bad.index
        )));
    }
    let q = q_lambda(k);
    let expand = |h: &SpectralFunction| {
        let mut rest = h.coeffs().clone();
        rest[0] = 0.0;
        let mut terms = Vec::new();
        for mode in &spectrum.modes {
            let a = mode.eigenvector.dot(&rest);
            terms.push((&mode.eigenvector * a, mode.eigenvalue));
        }
        for (v, _) in terms.clone() {
            rest -= v;
        }
        terms.push((rest, 0.0));
        terms
    };
    let (fs, gs) = (expand(f), expand(g));
    let mut total = 0.0;
    for (u, la) in &fs {
        for (v, lb) in &gs {
            total += 2.0 * u.component_mul(&q).dot(v) / (1.0 + la + lb);
        }
    }
    Ok(total)
}

/// `Ĉ(f, g) = 2μ*(f Q_{μ*} g)` for `V(x,y) = v(x)`.
pub fn closed_form_diffusion(
    mu_star: &ProbMeasure,
    kernel: &InteractionKernel,
    f: &SpectralFunction,
    g: &SpectralFunction,
) -> Result<f64> {
    if !matches!(kernel.form(), KernelForm::DiffusionPotential { .. }) {
        return Err(Error::InvalidInput(
            "closed_form_diffusion needs a kernel of the form V(x,y) = v(x)".into(),
        ));
    }
    let resp = LinearResponse::new(mu_star, kernel)?;
    let h = resp.c_hat_symmetric();
    Ok(f.coeffs().dot(&(h * g.coeffs())))
}

/// Predicted covariance matrix of `(Δ_∞ g_i)_i`.
pub fn predict(
    mu_star: &ProbMeasure,
    kernel: &InteractionKernel,
    gs: &[SpectralFunction],
    labels: &[String],
    method: CovarianceMethod,
) -> Result<LimitCovariance> {
    let resp = LinearResponse::new(mu_star, kernel)?;
    resp.require_hypothesis()?;
    let m = gs.len();
    let (matrix, horizon) = match method {
        CovarianceMethod::Quadrature => {
            let (c, t) = limit_covariance_matrix(&resp, gs)?;
            (c, Some(t))
        }
        CovarianceMethod::ClosedFormDiffusion => {
            let mut c = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    c[(i, j)] = closed_form_diffusion(mu_star, kernel, &gs[i], &gs[j])?;
                }
            }
            (c, None)
        }
        CovarianceMethod::ClosedFormSymmetric => {
            let shift = mu_star.distance(&ProbMeasure::uniform(mu_star.truncation()));
            if shift > 1e-10 {
                return Err(Error::InvalidInput(
                    "closed_form_symmetric requires the uniform equilibrium".into(),
                ));
            }
            let report = crate::kernels::mercer_check(kernel)?;
            let mut c = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    c[(i, j)] = closed_form_symmetric(&report.spectrum, &gs[i], &gs[j])?;
                }
            }
            (c, None)
        }
    };
    let sym = (&matrix + matrix.transpose()) * 0.5;
    if m > 0 {
        let min = SymmetricEigen::new(sym.clone()).eigenvalues.min();
        if min < -PSD_TOL * sym.amax().max(1.0) {
            return Err(Error::Singular(format!(
                "predicted covariance has eigenvalue {min:e}"
            )));
        }
    }
    Ok(LimitCovariance {
        test_functions: labels.to_vec(),
        matrix: (0..m).map(|i| sym.row(i).iter().copied().collect()).collect(),
        method,
        kappa: resp.diagnostics.kappa,
        horizon,
    })
}
