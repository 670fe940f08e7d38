//! Measures on the circle, represented by their density with respect to λ.

use crate::basis::{product_grid, synthesize, SpectralFunction, DEFAULT_GRID};
use crate::error::{Error, Result};

/// Tolerance for negative grid values of a truncated density.
pub const NEGATIVITY_TOL: f64 = 1e-10;

/// Grid used to validate and evaluate densities at truncation `k`.
pub fn eval_grid(k: usize) -> usize {
    DEFAULT_GRID.max(product_grid(k))
}

/// A probability measure `ρ λ` with `λ(ρ) = 1` and `ρ ≥ 0` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMeasure {
    density: SpectralFunction,
}

impl ProbMeasure {
    pub fn uniform(k: usize) -> Self {
        Self {
            density: SpectralFunction::constant(k, 1.0),
        }
    }

    /// Normalizes `density` to unit mass and checks nonnegativity on the
    /// evaluation grid.
    pub fn from_density(density: SpectralFunction) -> Result<Self> {
        let mass = density.mean();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidMeasure(format!("total mass {mass} is not positive")));
        }
        let density = density.scale(1.0 / mass);
        let min = min_on_grid(&density);
        if min < -NEGATIVITY_TOL {
            return Err(Error::InvalidMeasure(format!(
                "density takes the value {min:e} on the grid"
            )));
        }
        Ok(Self::from_normalized(density))
    }

    /// Wraps an already-normalized density without the grid check.
    pub(crate) fn from_normalized(mut density: SpectralFunction) -> Self {
        let mass = density.mean();
        if mass != 1.0 {
            density = density.scale(1.0 / mass);
        }
        Self { density }
    }

    pub fn density(&self) -> &SpectralFunction {
        &self.density
    }

    pub fn truncation(&self) -> usize {
        self.density.truncation()
    }

    /// `μ f = ∫ f dμ`.
    pub fn pair(&self, f: &SpectralFunction) -> f64 {
        self.density.dot(f)
    }

    pub fn to_signed(&self) -> SignedMeasure {
        SignedMeasure::new(self.density.clone())
    }

    /// Grid sup norm of the density difference.
    pub fn distance(&self, other: &ProbMeasure) -> f64 {
        self.density
            .sub(&other.density)
            .sup_norm(eval_grid(self.truncation()))
    }

    /// Convex combination `(1-w)·self + w·other`.
    pub fn mix(&self, other: &ProbMeasure, w: f64) -> ProbMeasure {
        let d = self.density.scale(1.0 - w).add(&other.density.scale(w));
        Self::from_normalized(d)
    }
}

/// A finite signed measure `ρ λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMeasure {
    density: SpectralFunction,
}

impl SignedMeasure {
    pub fn new(density: SpectralFunction) -> Self {
        Self { density }
    }

    pub fn zero(k: usize) -> Self {
        Self::new(SpectralFunction::zeros(k))
    }

    pub fn density(&self) -> &SpectralFunction {
        &self.density
    }

    pub fn truncation(&self) -> usize {
        self.density.truncation()
    }

    pub fn pair(&self, f: &SpectralFunction) -> f64 {
        self.density.dot(f)
    }

    pub fn mass(&self) -> f64 {
        self.density.mean()
    }
}

impl From<ProbMeasure> for SignedMeasure {
    fn from(mu: ProbMeasure) -> Self {
        SignedMeasure::new(mu.density)
    }
}

fn min_on_grid(f: &SpectralFunction) -> f64 {
    synthesize(f, eval_grid(f.truncation()))
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn check_truncation(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::TruncationMismatch { left, right });
    }
    Ok(())
}
