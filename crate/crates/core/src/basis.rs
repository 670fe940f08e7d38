//! Real Fourier basis on the circle with the normalized measure `dθ/2π`.
//!
//! Coefficient vectors have length `2K+1` and are laid out as
//! `[e_0, c_1, s_1, c_2, s_2, …, c_K, s_K]` where `e_0 ≡ 1`,
//! `c_k = √2 cos kθ` and `s_k = √2 sin kθ`. The family is orthonormal in
//! `L²(dθ/2π)`, so inner products of band-limited functions are plain dot
//! products of coefficient vectors.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRUNCATION: usize = 32;
pub const DEFAULT_GRID: usize = 256;

/// Number of coefficients for truncation order `k`.
pub const fn basis_len(k: usize) -> usize {
    2 * k + 1
}

/// Grid size used for products: large enough that the trapezoid rule
/// resolves every mode up to `K` of a product of two degree-`K` functions.
pub const fn product_grid(k: usize) -> usize {
    4 * k + 4
}

/// Truncation order for a coefficient vector of length `len`.
pub fn truncation_of(len: usize) -> Result<usize> {
    if len == 0 || len.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "coefficient vector of length {len} is not of the form 2K+1"
        )));
    }
    Ok((len - 1) / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "lowercase")]
pub enum BasisIndex {
    Constant,
    Cos(usize),
    Sin(usize),
}

impl BasisIndex {
    pub fn position(self) -> usize {
        match self {
            BasisIndex::Constant => 0,
            BasisIndex::Cos(k) => 2 * k - 1,
            BasisIndex::Sin(k) => 2 * k,
        }
    }

    pub fn from_position(p: usize) -> Self {
        match p {
            0 => BasisIndex::Constant,
            p if p % 2 == 1 => BasisIndex::Cos(p.div_ceil(2)),
            p => BasisIndex::Sin(p / 2),
        }
    }

    /// Frequency `k` (zero for the constant).
    pub fn frequency(self) -> usize {
        match self {
            BasisIndex::Constant => 0,
            BasisIndex::Cos(k) | BasisIndex::Sin(k) => k,
        }
    }

    pub fn is_valid_for(self, k: usize) -> bool {
        match self {
            BasisIndex::Constant => true,
            BasisIndex::Cos(f) | BasisIndex::Sin(f) => f >= 1 && f <= k,
        }
    }

    pub fn eval(self, theta: f64) -> f64 {
        match self {
            BasisIndex::Constant => 1.0,
            BasisIndex::Cos(k) => SQRT_2 * (k as f64 * theta).cos(),
            BasisIndex::Sin(k) => SQRT_2 * (k as f64 * theta).sin(),
        }
    }
}

impl fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisIndex::Constant => write!(f, "const"),
            BasisIndex::Cos(k) => write!(f, "cos{k}"),
            BasisIndex::Sin(k) => write!(f, "sin{k}"),
        }
    }
}

/// Evaluates all `2K+1` basis functions at `theta` into `out`.
///
/// Uses the angle-addition recurrence, so only one `sin_cos` call is made.
pub fn eval_basis_into(theta: f64, out: &mut [f64]) {
    let k = (out.len() - 1) / 2;
    out[0] = 1.0;
    if k == 0 {
        return;
    }
    let (s1, c1) = theta.sin_cos();
    let (mut c, mut s) = (c1, s1);
    for j in 1..=k {
        out[2 * j - 1] = SQRT_2 * c;
        out[2 * j] = SQRT_2 * s;
        let next_c = c * c1 - s * s1;
        let next_s = s * c1 + c * s1;
        c = next_c;
        s = next_s;
    }
}

pub fn eval_basis(theta: f64, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; basis_len(k)];
    eval_basis_into(theta, &mut out);
    out
}

/// Uniform grid `θ_j = 2πj/N`.
pub fn grid_points(n: usize) -> Vec<f64> {
    (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect()
}

/// Row-major `N × (2K+1)` table of basis values on the uniform grid.
struct GridTable {
    width: usize,
    values: Vec<f64>,
}

type GridCache = Mutex<HashMap<(usize, usize), Arc<GridTable>>>;

fn grid_table(k: usize, n: usize) -> Arc<GridTable> {
    static CACHE: OnceLock<GridCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("grid table cache poisoned");
    guard
        .entry((k, n))
        .or_insert_with(|| {
            let width = basis_len(k);
            let mut values = vec![0.0; n * width];
            for (j, theta) in grid_points(n).into_iter().enumerate() {
                eval_basis_into(theta, &mut values[j * width..(j + 1) * width]);
            }
            Arc::new(GridTable { width, values })
        })
        .clone()
}

/// A real function on the circle held by its truncated Fourier coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFunction {
    coeffs: DVector<f64>,
}

impl SpectralFunction {
    pub fn zeros(k: usize) -> Self {
        Self {
            coeffs: DVector::zeros(basis_len(k)),
        }
    }

    pub fn constant(k: usize, value: f64) -> Self {
        let mut f = Self::zeros(k);
        f.coeffs[0] = value;
        f
    }

    pub fn basis(k: usize, index: BasisIndex) -> Self {
        assert!(index.is_valid_for(k), "{index} outside truncation {k}");
        let mut f = Self::zeros(k);
        f.coeffs[index.position()] = 1.0;
        f
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        truncation_of(coeffs.len())?;
        Ok(Self {
            coeffs: DVector::from_vec(coeffs),
        })
    }

    pub fn from_vector(coeffs: DVector<f64>) -> Self {
        debug_assert!(coeffs.len() % 2 == 1);
        Self { coeffs }
    }

    pub fn truncation(&self) -> usize {
        (self.coeffs.len() - 1) / 2
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.coeffs
    }

    pub fn coeff(&self, index: BasisIndex) -> f64 {
        let p = index.position();
        if p < self.coeffs.len() {
            self.coeffs[p]
        } else {
            0.0
        }
    }

    /// λ-mean, i.e. the `e_0` coefficient.
    pub fn mean(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let basis = eval_basis(theta, self.truncation());
        self.coeffs.iter().zip(&basis).map(|(a, b)| a * b).sum()
    }

    /// `L²(λ)` inner product (coefficient dot product).
    pub fn dot(&self, other: &Self) -> f64 {
        self.coeffs.dot(&other.coeffs)
    }

    pub fn norm_l2(&self) -> f64 {
        self.coeffs.norm()
    }

    /// Sup norm over the uniform grid of `n` points.
    pub fn sup_norm(&self, n: usize) -> f64 {
        synthesize(self, n)
            .into_iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Re-expresses the function at truncation `k`, padding with zeros or
    /// dropping modes above `k`.
    pub fn with_truncation(&self, k: usize) -> Self {
        let mut out = Self::zeros(k);
        let m = out.len().min(self.len());
        out.coeffs.rows_mut(0, m).copy_from(&self.coeffs.rows(0, m));
        out
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::from_vector(&self.coeffs * a)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "truncation mismatch");
        Self::from_vector(&self.coeffs + &other.coeffs)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "truncation mismatch");
        Self::from_vector(&self.coeffs - &other.coeffs)
    }

    /// The function minus its λ-mean.
    pub fn centered(&self) -> Self {
        let mut out = self.clone();
        out.coeffs[0] = 0.0;
        out
    }
}

/// Trapezoid-rule coefficients `⟨f, e_α⟩_λ` of grid values on `θ_j = 2πj/N`.
pub fn analyze(values: &[f64], k: usize) -> Result<SpectralFunction> {
    let n = values.len();
    let min = basis_len(k);
    if n < min {
        return Err(Error::GridTooCoarse { n, k, min });
    }
    let table = grid_table(k, n);
    let mut coeffs = DVector::zeros(table.width);
    for (j, v) in values.iter().enumerate() {
        let row = &table.values[j * table.width..(j + 1) * table.width];
        for (c, e) in coeffs.iter_mut().zip(row) {
            *c += v * e;
        }
    }
    coeffs /= n as f64;
    Ok(SpectralFunction { coeffs })
}

/// Pointwise evaluation on the uniform grid of `n` points.
pub fn synthesize(f: &SpectralFunction, n: usize) -> Vec<f64> {
    let table = grid_table(f.truncation(), n);
    (0..n)
        .map(|j| {
            let row = &table.values[j * table.width..(j + 1) * table.width];
            f.coeffs.iter().zip(row).map(|(a, e)| a * e).sum()
        })
        .collect()
}

/// Maps grid values through `op` and re-analyzes at truncation `k`.
pub fn map_pointwise(f: &SpectralFunction, n: usize, op: impl Fn(f64) -> f64) -> Result<SpectralFunction> {
    let values: Vec<f64> = synthesize(f, n).into_iter().map(op).collect();
    analyze(&values, f.truncation())
}

/// `N × (2K+1)` matrix of basis values on the uniform grid.
pub fn synthesis_matrix(k: usize, n: usize) -> DMatrix<f64> {
    let table = grid_table(k, n);
    DMatrix::from_row_slice(n, table.width, &table.values)
}

/// Galerkin matrix of multiplication by `f`: entry `(α, β)` is `λ(f e_α e_β)`.
pub fn multiplication_matrix(f: &SpectralFunction) -> DMatrix<f64> {
    let k = f.truncation();
    let n = product_grid(k);
    let e = synthesis_matrix(k, n);
    let values = synthesize(f, n);
    let mut weighted = e.clone();
    for (j, v) in values.iter().enumerate() {
        weighted.row_mut(j).scale_mut(*v / n as f64);
    }
    e.tr_mul(&weighted)
}

/// Galerkin product: pointwise product on a grid fine enough to avoid
/// aliasing, projected back onto modes `≤ K`.
pub fn multiply(f: &SpectralFunction, g: &SpectralFunction) -> SpectralFunction {
    assert_eq!(f.len(), g.len(), "truncation mismatch");
    let k = f.truncation();
    let n = product_grid(k);
    let fv = synthesize(f, n);
    let gv = synthesize(g, n);
    let prod: Vec<f64> = fv.iter().zip(&gv).map(|(a, b)| a * b).collect();
    analyze(&prod, k).expect("product grid always resolves K")
}

pub fn laplacian(f: &SpectralFunction) -> SpectralFunction {
    let mut out = f.clone();
    for p in 0..out.len() {
        let k = BasisIndex::from_position(p).frequency() as f64;
        out.coeffs[p] *= -k * k;
    }
    out
}

/// `∂_θ`: `c_k ↦ −k s_k`, `s_k ↦ k c_k`.
pub fn derivative(f: &SpectralFunction) -> SpectralFunction {
    let mut out = SpectralFunction::zeros(f.truncation());
    for k in 1..=f.truncation() {
        let (c, s) = (f.coeffs[2 * k - 1], f.coeffs[2 * k]);
        let kf = k as f64;
        out.coeffs[2 * k - 1] = kf * s;
        out.coeffs[2 * k] = -kf * c;
    }
    out
}
