//! Sample statistics for replicated fluctuations: covariance, percentile
//! bootstrap, and a Kolmogorov–Smirnov test against a centered normal law.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_RESAMPLES: usize = 2000;

fn require_rows(samples: &DMatrix<f64>) -> Result<()> {
    if samples.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 samples, got {}",
            samples.nrows()
        )));
    }
    Ok(())
}

/// Unbiased covariance of the columns; rows are replications.
pub fn empirical_covariance(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_rows(samples)?;
    let n = samples.nrows();
    let m = samples.ncols();
    let means: Vec<f64> = (0..m).map(|j| samples.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (samples[(r, i)] - means[i]) * (samples[(r, j)] - means[j]);
            }
            cov[(i, j)] = acc / (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok(cov)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfidenceMatrix {
    pub level: f64,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl ConfidenceMatrix {
    pub fn contains(&self, i: usize, j: usize, value: f64) -> bool {
        self.lower[i][j] <= value && value <= self.upper[i][j]
    }
}

/// Percentile bootstrap of every covariance entry, resampling replications.
pub fn bootstrap_ci(
    samples: &DMatrix<f64>,
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<ConfidenceMatrix> {
    require_rows(samples)?;
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidInput(format!(
            "bootstrap needs level in (0,1) and resamples > 0 (got {level}, {resamples})"
        )));
    }
    let n = samples.nrows();
    let m = samples.ncols();
    let mut rng = rng_from_seed(seed);
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(resamples); m * m];
    let mut boot = DMatrix::zeros(n, m);
    for _ in 0..resamples {
        for r in 0..n {
            let pick = rng.random_range(0..n);
            boot.set_row(r, &samples.row(pick));
        }
        let c = empirical_covariance(&boot)?;
        for (d, v) in draws.iter_mut().zip(c.iter()) {
            d.push(*v);
        }
    }
    let alpha = (1.0 - level) / 2.0;
    let mut lower = vec![vec![0.0; m]; m];
    let mut upper = vec![vec![0.0; m]; m];
    let point = empirical_covariance(samples)?;
    for j in 0..m {
        for i in 0..m {
            let d = &mut draws[j * m + i];
            d.sort_by(f64::total_cmp);
            let lo = quantile_sorted(d, alpha).min(point[(i, j)]);
            let hi = quantile_sorted(d, 1.0 - alpha).max(point[(i, j)]);
            lower[i][j] = lo;
            upper[i][j] = hi;
        }
    }
    Ok(ConfidenceMatrix { level, lower, upper })
}

/// Linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample mean.
pub fn mean_se(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance, `√((m₄ − s⁴)/n)`.
pub fn variance_se(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    let s2 = variance(xs);
    ((m4 - s2 * s2).max(0.0) / n).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Q(λ) = 2 Σ_{j≥1} (−1)^{j−1} e^{−2j²λ²}`, the Kolmogorov tail.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test against `N(0, variance)`, with Stephens' finite-n
/// correction to the asymptotic distribution.
pub fn ks_normal(xs: &[f64], variance: f64) -> Result<KsResult> {
    if xs.is_empty() || !(variance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "KS test needs samples and a positive variance (got {} samples, variance {variance})",
            xs.len()
        )));
    }
    let sd = variance.sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = normal_cdf(x / sd);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let p_value = kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
    Ok(KsResult { statistic: d, p_value })
}
