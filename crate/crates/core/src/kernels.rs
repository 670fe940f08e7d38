//! Interaction kernels, the Gibbs map `Π(μ) = ξ(Vμ)λ`, its fixed points and
//! the Mercer condition.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::basis::{basis_len, multiply, synthesize, analyze, BasisIndex, SpectralFunction};
use crate::error::{Error, Result};
use crate::measure::{check_truncation, eval_grid, ProbMeasure, SignedMeasure};

const SYMMETRY_TOL: f64 = 1e-12;
const MERCER_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelForm {
    /// `V(x,y) = constant + Σ_k a_k (c_k(x)c_k(y) + s_k(x)s_k(y))`.
    TranslationInvariant {
        multipliers: BTreeMap<usize, f64>,
        constant: f64,
    },
    /// Symmetric matrix `V_{αβ} = ⟨e_α, V e_β⟩`.
    General,
    /// `V(x,y) = v(x)`: the particle is an ordinary gradient diffusion.
    DiffusionPotential { v: SpectralFunction },
}

/// Interaction potential together with its coefficient matrix
/// `V(x,y) = Σ_{αβ} V_{αβ} e_α(x) e_β(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionKernel {
    form: KernelForm,
    matrix: DMatrix<f64>,
}

impl InteractionKernel {
    pub fn zero(k: usize) -> Self {
        Self::translation_invariant(k, BTreeMap::new(), 0.0).expect("empty multipliers are valid")
    }

    pub fn translation_invariant(
        k: usize,
        multipliers: BTreeMap<usize, f64>,
        constant: f64,
    ) -> Result<Self> {
        let n = basis_len(k);
        let mut matrix = DMatrix::zeros(n, n);
        matrix[(0, 0)] = constant;
        for (&freq, &a) in &multipliers {
            if freq == 0 || freq > k {
                return Err(Error::InvalidInput(format!(
                    "kernel frequency {freq} outside 1..={k}"
                )));
            }
            let (c, s) = (BasisIndex::Cos(freq).position(), BasisIndex::Sin(freq).position());
            matrix[(c, c)] = a;
            matrix[(s, s)] = a;
        }
        Ok(Self {
            form: KernelForm::TranslationInvariant {
                multipliers,
                constant,
            },
            matrix,
        })
    }

    /// Convenience for the single- and few-mode kernels used throughout.
    pub fn from_multipliers(k: usize, modes: &[(usize, f64)]) -> Result<Self> {
        Self::translation_invariant(k, modes.iter().copied().collect(), 0.0)
    }

    pub fn general(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidInput("kernel matrix must be square".into()));
        }
        crate::basis::truncation_of(matrix.nrows())?;
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * matrix.amax().max(1.0) {
            return Err(Error::InvalidInput(format!(
                "kernel matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self {
            form: KernelForm::General,
            matrix,
        })
    }

    pub fn diffusion(v: SpectralFunction) -> Self {
        let n = v.len();
        let mut matrix = DMatrix::zeros(n, n);
        matrix.column_mut(0).copy_from(v.coeffs());
        Self {
            form: KernelForm::DiffusionPotential { v },
            matrix,
        }
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn truncation(&self) -> usize {
        (self.matrix.nrows() - 1) / 2
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self.form, KernelForm::DiffusionPotential { .. })
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|v| *v == 0.0)
    }

    /// The same kernel shifted by an additive constant.
    pub fn plus_constant(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.matrix[(0, 0)] += c;
        if let KernelForm::TranslationInvariant { constant, .. } = &mut out.form {
            *constant += c;
        }
        out
    }

    /// The function `y ↦ V(x, y)` for a fixed `x`.
    pub fn section(&self, x: f64) -> SpectralFunction {
        let e = DVector::from_vec(crate::basis::eval_basis(x, self.truncation()));
        SpectralFunction::from_vector(self.matrix.tr_mul(&e))
    }
}

/// `Vμ(x) = ∫ V(x,y) μ(dy)`.
pub fn v_mu(kernel: &InteractionKernel, mu: &SignedMeasure) -> Result<SpectralFunction> {
    check_truncation(kernel.truncation(), mu.truncation())?;
    Ok(SpectralFunction::from_vector(
        kernel.matrix() * mu.density().coeffs(),
    ))
}

/// Gibbs density `e^{-f} / λ(e^{-f})`.
pub fn xi(f: &SpectralFunction) -> ProbMeasure {
    let k = f.truncation();
    let n = eval_grid(k);
    let values = synthesize(f, n);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = values.iter().map(|v| (-(v - min)).exp()).collect();
    let z = weights.iter().sum::<f64>() / n as f64;
    let density: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let density = analyze(&density, k).expect("evaluation grid resolves K");
    ProbMeasure::from_normalized(density)
}

/// `Π(μ) = ξ(Vμ) λ`.
pub fn pi_map(kernel: &InteractionKernel, mu: &ProbMeasure) -> Result<ProbMeasure> {
    Ok(xi(&v_mu(kernel, &mu.to_signed())?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub measure: ProbMeasure,
    /// `‖μ − Π(μ)‖∞` on the evaluation grid.
    pub residual: f64,
    pub iterations: usize,
}

/// Damped iteration `μ ← (1−d)μ + dΠ(μ)` until `‖μ − Π(μ)‖∞ ≤ tol`.
pub fn fix_pi_solve(
    kernel: &InteractionKernel,
    start: &ProbMeasure,
    opts: FixPointOptions,
) -> Result<FixedPoint> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "damping {} outside (0, 1]",
            opts.damping
        )));
    }
    check_truncation(kernel.truncation(), start.truncation())?;
    let mut mu = start.clone();
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let image = pi_map(kernel, &mu)?;
        residual = mu.distance(&image);
        if residual <= opts.tol {
            return Ok(FixedPoint {
                measure: mu,
                residual,
                iterations: it,
            });
        }
        if !residual.is_finite() {
            break;
        }
        mu = mu.mix(&image, opts.damping);
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual,
    })
}

/// Solves with the given options and halves the damping on failure, down to
/// `min_damping`.
pub fn fix_pi_solve_with_retry(
    kernel: &InteractionKernel,
    start: &ProbMeasure,
    opts: FixPointOptions,
    min_damping: f64,
) -> Result<FixedPoint> {
    let mut opts = opts;
    loop {
        match fix_pi_solve(kernel, start, opts) {
            Err(Error::NotConverged { .. }) if opts.damping / 2.0 >= min_damping => {
                opts.damping /= 2.0;
            }
            other => return other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMode {
    /// Basis function carrying most of the eigenvector's weight.
    pub index: BasisIndex,
    pub eigenvalue: f64,
    /// Unit eigenvector in the coefficient basis (zero on `e_0`).
    pub eigenvector: DVector<f64>,
}

/// Nonzero eigenvalues of the kernel restricted to mean-zero modes.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpectrum {
    pub truncation: usize,
    pub modes: Vec<KernelMode>,
}

impl KernelSpectrum {
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.eigenvalue).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MercerReport {
    pub is_mercer: bool,
    pub spectrum: KernelSpectrum,
}

/// Whether `V` is, up to an additive constant, a positive semidefinite kernel.
pub fn mercer_check(kernel: &InteractionKernel) -> Result<MercerReport> {
    let k = kernel.truncation();
    let n = basis_len(k);
    match kernel.form() {
        KernelForm::DiffusionPotential { .. } => Err(Error::InvalidInput(
            "the Mercer condition applies to symmetric kernels only".into(),
        )),
        KernelForm::TranslationInvariant { multipliers, .. } => {
            let mut modes = Vec::new();
            for (&freq, &a) in multipliers {
                if a.abs() <= MERCER_TOL {
                    continue;
                }
                for index in [BasisIndex::Cos(freq), BasisIndex::Sin(freq)] {
                    let mut v = DVector::zeros(n);
                    v[index.position()] = 1.0;
                    modes.push(KernelMode {
                        index,
                        eigenvalue: a,
                        eigenvector: v,
                    });
                }
            }
            let is_mercer = multipliers.values().all(|a| *a >= -MERCER_TOL);
            Ok(MercerReport {
                is_mercer,
                spectrum: KernelSpectrum {
                    truncation: k,
                    modes,
                },
            })
        }
        KernelForm::General => {
            let m = kernel.matrix();
            let block = m.view((1, 1), (n - 1, n - 1)).into_owned();
            let mixing = m.view((1, 0), (n - 1, 1)).into_owned();
            let eig = SymmetricEigen::new(block);
            let mut modes = Vec::new();
            let mut is_mercer = true;
            for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
                let u = eig.eigenvectors.column(i);
                if lambda < -MERCER_TOL {
                    is_mercer = false;
                }
                if lambda.abs() <= MERCER_TOL {
                    // a constant shift cannot absorb coupling to 1 along a null direction
                    if u.dot(&mixing.column(0)).abs() > MERCER_TOL {
                        is_mercer = false;
                    }
                    continue;
                }
                let mut v = DVector::zeros(n);
                v.rows_mut(1, n - 1).copy_from(&u);
                let pos = v.iamax();
                modes.push(KernelMode {
                    index: BasisIndex::from_position(pos),
                    eigenvalue: lambda,
                    eigenvector: v,
                });
            }
            modes.sort_by(|a, b| b.eigenvalue.total_cmp(&a.eigenvalue));
            Ok(MercerReport {
                is_mercer,
                spectrum: KernelSpectrum {
                    truncation: k,
                    modes,
                },
            })
        }
    }
}

/// `Cov_μ(f,g) = μ(fg) − (μf)(μg)`.
pub fn cov_mu(mu: &ProbMeasure, f: &SpectralFunction, g: &SpectralFunction) -> f64 {
    mu.pair(&multiply(f, g)) - mu.pair(f) * mu.pair(g)
}
