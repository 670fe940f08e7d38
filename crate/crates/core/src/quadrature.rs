//! Romberg integration of functionals along linear flows `z' = L z`.
//!
//! The flow is advanced exactly with matrix exponentials, so the only error
//! is that of the trapezoid rule, removed by Richardson extrapolation panel
//! by panel.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Minimum horizon for integrals over `[0, ∞)`.
pub const HORIZON_FLOOR: f64 = 40.0;

pub const DEFAULT_REL_TOL: f64 = 1e-10;

const MAX_LEVEL: usize = 16;
const MIN_LEVEL: usize = 3;
const MAX_PANEL: f64 = 4.0;

/// `T* = max(40, 20/κ)`.
pub fn horizon(decay_rate: f64) -> f64 {
    if decay_rate > 0.0 {
        HORIZON_FLOOR.max(20.0 / decay_rate)
    } else {
        f64::INFINITY
    }
}

/// Panel breakpoints on `[0, horizon]`: dyadic near zero, then uniform with
/// width at most 4.
pub fn log_panels(horizon: f64) -> Vec<f64> {
    let mut pts = vec![0.0, 0.25];
    let mut x = 0.25;
    while x < horizon {
        let step = x.min(MAX_PANEL);
        x = (x + step).min(horizon);
        pts.push(x);
    }
    pts
}

#[derive(Debug, Clone)]
pub struct FlowIntegral {
    pub value: DVector<f64>,
    /// Sum of the last Richardson corrections over all panels.
    pub error_estimate: f64,
    pub evaluations: usize,
}

/// `∫ φ(e^{tL} z0) dt` over the panels `[b_i, b_{i+1}]`.
///
/// Each panel converges relative to its own size or to the running total,
/// or below `abs_tol`.
///
/// The state is a matrix so that several initial conditions flow together;
/// `φ` returns a vector of any fixed length.
pub fn integrate_flow<F>(
    generator: &DMatrix<f64>,
    z0: &DMatrix<f64>,
    breakpoints: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    integrand: F,
) -> Result<FlowIntegral>
where
    F: Fn(&DMatrix<f64>) -> DVector<f64>,
{
    if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput(
            "quadrature breakpoints must be increasing".into(),
        ));
    }
    let mut props = Propagators::new(generator);
    let mut z = if breakpoints[0] == 0.0 {
        z0.clone()
    } else {
        props.get(breakpoints[0]) * z0
    };
    let mut total: Option<DVector<f64>> = None;
    let mut error_estimate = 0.0;
    let mut evaluations = 0;
    for w in breakpoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        let floor = total.as_ref().map_or(0.0, |t| rel_tol * t.amax()).max(abs_tol);
        let panel = romberg_panel(&mut props, &z, b - a, rel_tol, floor, &integrand)?;
        evaluations += panel.evaluations;
        error_estimate += panel.error;
        total = Some(match total {
            Some(t) => t + panel.value,
            None => panel.value,
        });
        z = panel.end;
    }
    Ok(FlowIntegral {
        value: total.expect("at least one panel"),
        error_estimate,
        evaluations,
    })
}

struct Propagators<'a> {
    generator: &'a DMatrix<f64>,
    cache: HashMap<u64, DMatrix<f64>>,
}

impl<'a> Propagators<'a> {
    fn new(generator: &'a DMatrix<f64>) -> Self {
        Self {
            generator,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, h: f64) -> &DMatrix<f64> {
        let g = self.generator;
        self.cache
            .entry(h.to_bits())
            .or_insert_with(|| (g * h).exp())
    }
}

struct Panel {
    value: DVector<f64>,
    end: DMatrix<f64>,
    error: f64,
    evaluations: usize,
}

fn romberg_panel<F>(
    props: &mut Propagators,
    start: &DMatrix<f64>,
    width: f64,
    rel_tol: f64,
    abs_tol: f64,
    integrand: &F,
) -> Result<Panel>
where
    F: Fn(&DMatrix<f64>) -> DVector<f64>,
{
    // states at the current trapezoid nodes, left to right
    let end = props.get(width) * start;
    let mut nodes = vec![start.clone(), end.clone()];
    let f0 = integrand(start);
    let f1 = integrand(&end);
    let mut evaluations = 2;
    let mut sum_interior = DVector::zeros(f0.len());
    let ends = (&f0 + &f1) * 0.5;
    let mut prev_row = vec![&ends * width];
    for level in 1..=MAX_LEVEL {
        let count = 1usize << level;
        let h = width / count as f64;
        let step = props.get(h).clone();
        let mut refined = Vec::with_capacity(nodes.len() * 2 - 1);
        for pair in nodes.windows(2) {
            let mid = &step * &pair[0];
            sum_interior += integrand(&mid);
            evaluations += 1;
            refined.push(pair[0].clone());
            refined.push(mid);
        }
        refined.push(nodes.last().expect("nonempty").clone());
        nodes = refined;

        let mut row = vec![(&ends + &sum_interior) * h];
        let mut factor = 1.0;
        for j in 1..=level {
            factor *= 4.0;
            let r = (&row[j - 1] * factor - &prev_row[j - 1]) / (factor - 1.0);
            row.push(r);
        }
        let best = &row[level];
        let diff = (best - &prev_row[level - 1]).amax();
        let scale = best.amax().max(f64::MIN_POSITIVE);
        if level >= MIN_LEVEL && (diff <= rel_tol * scale || diff <= abs_tol || diff <= 1e-300) {
            return Ok(Panel {
                value: best.clone(),
                end,
                error: diff,
                evaluations,
            });
        }
        prev_row = row;
    }
    let last = &prev_row[MAX_LEVEL];
    Err(Error::NotConverged {
        iterations: MAX_LEVEL,
        residual: (last - &prev_row[MAX_LEVEL - 1]).amax(),
    })
}
