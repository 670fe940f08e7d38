//! Galerkin matrices of the linear-response operators at a measure `μ`:
//!
//! * `A_μ f = ½Δf − ½⟨∇Vμ, ∇f⟩`, the generator of the frozen diffusion
//!   (its invariant law is `Π(μ)`),
//! * `Q_μ`, the centered inverse of `−A_μ` (`−A_μ Q_μ f = f − Π(μ)f`, `Π(μ)(Q_μ f) = 0`),
//! * `G_μ f(x) = f(x)/2 + Cov_μ(V_x, f)` and its adjoint on signed measures,
//! * the covariance form `Ĉ_μ(f, g) = 2⟨f, Q_μ g⟩_{Π(μ)}` and its kernel
//!   `C_μ(x, y) = Ĉ_μ(V_x, V_y)`.
//!
//! Functions are coefficient vectors; signed measures are density
//! coefficient vectors, so the pairing `m f` is a dot product and the
//! adjoint of a matrix is its transpose.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::basis::{
    basis_len, derivative, laplacian, multiplication_matrix, synthesis_matrix, BasisIndex,
    SpectralFunction,
};
use crate::error::{Error, Result};
use crate::kernels::{pi_map, v_mu, InteractionKernel};
use crate::measure::{check_truncation, ProbMeasure, SignedMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OperatorRole {
    A,
    Q,
    G,
    #[serde(rename = "Gstar")]
    GStar,
}

/// Dense matrix of a linear operator in the truncated basis.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    matrix: DMatrix<f64>,
    base: ProbMeasure,
    role: OperatorRole,
}

impl OperatorMatrix {
    pub fn new(matrix: DMatrix<f64>, base: ProbMeasure, role: OperatorRole) -> Self {
        Self { matrix, base, role }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn base_measure(&self) -> &ProbMeasure {
        &self.base
    }

    pub fn role(&self) -> OperatorRole {
        self.role
    }

    pub fn truncation(&self) -> usize {
        (self.matrix.nrows() - 1) / 2
    }

    pub fn apply(&self, f: &SpectralFunction) -> SpectralFunction {
        SpectralFunction::from_vector(&self.matrix * f.coeffs())
    }

    /// Action on signed-measure densities (used for the `Gstar` role).
    pub fn apply_measure(&self, m: &SignedMeasure) -> SignedMeasure {
        SignedMeasure::new(SpectralFunction::from_vector(&self.matrix * m.density().coeffs()))
    }
}

fn unit(k: usize, p: usize) -> SpectralFunction {
    SpectralFunction::basis(k, BasisIndex::from_position(p))
}

/// Galerkin matrix of `f ↦ ½Δf − ½(∂_θ Vμ)(∂_θ f)`, the generator whose
/// invariant law is `Π(μ)`.
pub fn build_a(mu: &ProbMeasure, kernel: &InteractionKernel) -> Result<OperatorMatrix> {
    check_truncation(kernel.truncation(), mu.truncation())?;
    let k = mu.truncation();
    let n = basis_len(k);
    let drift = derivative(&v_mu(kernel, &mu.to_signed())?);
    let mult = multiplication_matrix(&drift);
    let mut a = DMatrix::zeros(n, n);
    for p in 0..n {
        let e = unit(k, p);
        let col = (laplacian(&e).coeffs() - &mult * derivative(&e).coeffs()) * 0.5;
        a.set_column(p, &col);
    }
    Ok(OperatorMatrix::new(a, mu.clone(), OperatorRole::A))
}

/// Solves `−A_μ q = f − Π(μ)f` on the mean-zero modes and recenters so that
/// `Π(μ)q = 0`.
pub fn build_q(mu: &ProbMeasure, kernel: &InteractionKernel) -> Result<OperatorMatrix> {
    let a = build_a(mu, kernel)?;
    let pi = pi_map(kernel, mu)?;
    q_from_a(&a, &pi)
}

fn q_from_a(a: &OperatorMatrix, pi: &ProbMeasure) -> Result<OperatorMatrix> {
    let n = a.matrix().nrows();
    let m = n - 1;
    let restricted = a.matrix().view((1, 1), (m, m)).into_owned();
    let lu = restricted.lu();
    // rhs for e_β is −(e_β − π_β·1) restricted to modes ≥ 1, i.e. −e_β there
    let mut rhs = DMatrix::zeros(m, n);
    for beta in 1..n {
        rhs[(beta - 1, beta)] = -1.0;
    }
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("A restricted to mean-zero modes is not invertible".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite solution of the Poisson system".into()));
    }
    let mut q = DMatrix::zeros(n, n);
    q.view_mut((1, 0), (m, n)).copy_from(&sol);
    let weights = pi.density().coeffs();
    for beta in 0..n {
        let shift = weights.dot(&q.column(beta)) / weights[0];
        q[(0, beta)] -= shift;
    }
    Ok(OperatorMatrix::new(q, a.base_measure().clone(), OperatorRole::Q))
}

/// Centered multiplication matrix `M_ρ − ρρᵀ`, the Galerkin form of `Cov_μ`.
fn covariance_matrix(mu: &ProbMeasure) -> DMatrix<f64> {
    let rho = mu.density().coeffs();
    multiplication_matrix(mu.density()) - rho * rho.transpose()
}

/// `G_μ = I/2 + V (M_ρ − ρρᵀ)`; column β is `x ↦ e_β(x)/2 + Cov_μ(V_x, e_β)`.
pub fn build_g(mu: &ProbMeasure, kernel: &InteractionKernel) -> Result<OperatorMatrix> {
    check_truncation(kernel.truncation(), mu.truncation())?;
    let n = basis_len(mu.truncation());
    let g = DMatrix::identity(n, n) * 0.5 + kernel.matrix() * covariance_matrix(mu);
    Ok(OperatorMatrix::new(g, mu.clone(), OperatorRole::G))
}

/// Adjoint of `G_μ` on density coefficients, defined by `m(G f) = (G* m) f`.
pub fn build_gstar(mu: &ProbMeasure, kernel: &InteractionKernel) -> Result<OperatorMatrix> {
    let g = build_g(mu, kernel)?;
    Ok(OperatorMatrix::new(
        g.matrix().transpose(),
        mu.clone(),
        OperatorRole::GStar,
    ))
}

const EIGEN_SYMMETRY_TOL: f64 = 1e-13;

/// `t ↦ e^{−tG}` for a fixed dense generator.
///
/// Symmetric generators are diagonalized once; otherwise each time uses
/// scaling-and-squaring with a Padé approximant.
#[derive(Debug, Clone)]
pub struct Semigroup {
    generator: DMatrix<f64>,
    eigen: Option<SymmetricEigen<f64, nalgebra::Dyn>>,
}

impl Semigroup {
    pub fn new(generator: &DMatrix<f64>) -> Self {
        let asym = (generator - generator.transpose()).amax();
        let eigen = (asym <= EIGEN_SYMMETRY_TOL * generator.amax().max(1.0))
            .then(|| SymmetricEigen::new((generator + generator.transpose()) * 0.5));
        Self {
            generator: generator.clone(),
            eigen,
        }
    }

    /// Forces the scaling-and-squaring route.
    pub fn pade_only(generator: &DMatrix<f64>) -> Self {
        Self {
            generator: generator.clone(),
            eigen: None,
        }
    }

    pub fn uses_eigendecomposition(&self) -> bool {
        self.eigen.is_some()
    }

    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        assert!(t >= 0.0, "semigroup time must be nonnegative");
        match &self.eigen {
            Some(eig) => {
                let decay = eig.eigenvalues.map(|l| (-t * l).exp());
                let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&decay);
                scaled * eig.eigenvectors.transpose()
            }
            None => (&self.generator * -t).exp(),
        }
    }

    pub fn apply(&self, t: f64, f: &DVector<f64>) -> DVector<f64> {
        self.matrix(t) * f
    }
}

/// `e^{−tG} f`.
pub fn semigroup_apply(op: &OperatorMatrix, t: f64, f: &SpectralFunction) -> Result<SpectralFunction> {
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("semigroup time {t} is negative")));
    }
    Ok(SpectralFunction::from_vector(
        Semigroup::new(op.matrix()).apply(t, f.coeffs()),
    ))
}

/// The decay rate the limit theory may use never exceeds this.
pub const MAX_DECAY_RATE: f64 = 0.5 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct OperatorDiagnostics {
    /// Smallest eigenvalue of `½(G + Gᵀ)` in `L²(λ)`.
    pub kappa: f64,
    /// Largest real part of the spectrum of `−G`.
    pub spectral_abscissa: f64,
    pub hypothesis_holds: bool,
}

impl OperatorDiagnostics {
    /// `min(κ, ½ − 10⁻⁶)`, used for quadrature horizons.
    pub fn effective_rate(&self) -> f64 {
        self.kappa.min(MAX_DECAY_RATE)
    }
}

pub fn diagnostics(op: &OperatorMatrix) -> OperatorDiagnostics {
    let g = op.matrix();
    let sym = (g + g.transpose()) * 0.5;
    let kappa = SymmetricEigen::new(sym).eigenvalues.min();
    let spectral_abscissa = (-g.clone())
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    OperatorDiagnostics {
        kappa,
        spectral_abscissa,
        hypothesis_holds: kappa > 0.0,
    }
}

/// Everything needed to evaluate covariance forms at a fixed `(μ, V)`.
#[derive(Debug, Clone)]
pub struct LinearResponse {
    pub mu: ProbMeasure,
    pub kernel: InteractionKernel,
    pub pi: ProbMeasure,
    pub a: OperatorMatrix,
    pub q: OperatorMatrix,
    pub g: OperatorMatrix,
    /// Matrix `H` with `Ĉ_μ(f, g) = fᵀ H g`.
    pub c_hat: DMatrix<f64>,
    pub diagnostics: OperatorDiagnostics,
}

impl LinearResponse {
    pub fn new(mu: &ProbMeasure, kernel: &InteractionKernel) -> Result<Self> {
        let a = build_a(mu, kernel)?;
        let pi = pi_map(kernel, mu)?;
        let q = q_from_a(&a, &pi)?;
        let g = build_g(mu, kernel)?;
        let c_hat = multiplication_matrix(pi.density()) * q.matrix() * 2.0;
        let diagnostics = diagnostics(&g);
        Ok(Self {
            mu: mu.clone(),
            kernel: kernel.clone(),
            pi,
            a,
            q,
            g,
            c_hat,
            diagnostics,
        })
    }

    pub fn truncation(&self) -> usize {
        self.mu.truncation()
    }

    pub fn c_hat(&self, f: &SpectralFunction, g: &SpectralFunction) -> f64 {
        f.coeffs().dot(&(&self.c_hat * g.coeffs()))
    }

    /// Symmetrized `H`; equal to `H` up to truncation error.
    pub fn c_hat_symmetric(&self) -> DMatrix<f64> {
        (&self.c_hat + self.c_hat.transpose()) * 0.5
    }

    /// Coefficients of `C_μ(x, y) = e(x)ᵀ V H Vᵀ e(y)`.
    pub fn c_kernel_coefficients(&self) -> DMatrix<f64> {
        let v = self.kernel.matrix();
        v * self.c_hat_symmetric() * v.transpose()
    }

    /// Refuses when Hypothesis-style coercivity of `G_μ` fails.
    pub fn require_hypothesis(&self) -> Result<()> {
        if self.diagnostics.hypothesis_holds {
            Ok(())
        } else {
            Err(Error::Refused(format!(
                "G_mu is not coercive in L2(lambda): kappa = {:.6} <= 0, spectral abscissa {:.6}",
                self.diagnostics.kappa, self.diagnostics.spectral_abscissa
            )))
        }
    }
}

/// `Ĉ_μ(f, g) = 2 Π(μ)(f · Q_μ g)`.
pub fn c_hat(
    mu: &ProbMeasure,
    kernel: &InteractionKernel,
    f: &SpectralFunction,
    g: &SpectralFunction,
) -> Result<f64> {
    Ok(LinearResponse::new(mu, kernel)?.c_hat(f, g))
}

/// `C_μ(θ_i, θ_j)` on the uniform grid of `n` points.
pub fn c_kernel(mu: &ProbMeasure, kernel: &InteractionKernel, n: usize) -> Result<DMatrix<f64>> {
    let resp = LinearResponse::new(mu, kernel)?;
    Ok(c_kernel_on_grid(&resp, n))
}

pub fn c_kernel_on_grid(resp: &LinearResponse, n: usize) -> DMatrix<f64> {
    let e = synthesis_matrix(resp.truncation(), n);
    let c = &e * resp.c_kernel_coefficients() * e.transpose();
    (&c + c.transpose()) * 0.5
}
