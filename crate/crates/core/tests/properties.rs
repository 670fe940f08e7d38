use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;

use sidlab::basis::{analyze, basis_len, multiply, synthesize, SpectralFunction};
use sidlab::kernels::{mercer_check, pi_map, InteractionKernel};
use sidlab::measure::{eval_grid, ProbMeasure};
use sidlab::operators::{build_g, build_gstar, LinearResponse};
use sidlab::ou::{closed_form_symmetric, limit_covariance_matrix};
use sidlab::seed::split_seed;
use sidlab::stats::{bootstrap_ci, empirical_covariance};

fn coeffs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, basis_len(k))
}

fn small_density(k: usize) -> impl Strategy<Value = ProbMeasure> {
    let bound = 0.6 / (2.0 * k as f64 * 2f64.sqrt());
    prop::collection::vec(-bound..bound, basis_len(k) - 1).prop_map(move |rest| {
        let mut c = vec![1.0];
        c.extend(rest);
        ProbMeasure::from_density(SpectralFunction::from_coeffs(c).unwrap()).unwrap()
    })
}

fn repelling_modes(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.45..3.0f64, k)
}

fn kernel_from(modes: &[f64]) -> InteractionKernel {
    let k = modes.len();
    let m: BTreeMap<usize, f64> = modes.iter().enumerate().map(|(i, a)| (i + 1, *a)).collect();
    InteractionKernel::translation_invariant(k, m, 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthesis_round_trip(c in coeffs(5)) {
        let f = SpectralFunction::from_coeffs(c).unwrap();
        let back = analyze(&synthesize(&f, eval_grid(5)), 5).unwrap();
        prop_assert!((back.coeffs() - f.coeffs()).amax() < 1e-12);
    }

    #[test]
    fn product_matches_pointwise(a in coeffs(3), b in coeffs(3), x in 0.0..std::f64::consts::TAU) {
        let f = SpectralFunction::from_coeffs(a).unwrap();
        let g = SpectralFunction::from_coeffs(b).unwrap();
        let fg = multiply(&f.with_truncation(6), &g.with_truncation(6));
        prop_assert!((fg.eval(x) - f.eval(x) * g.eval(x)).abs() < 1e-12);
    }

    #[test]
    fn pi_is_a_probability_measure(modes in repelling_modes(3), mu in small_density(3)) {
        let kernel = kernel_from(&modes);
        let p = pi_map(&kernel, &mu).unwrap();
        prop_assert_eq!(p.density().coeffs()[0], 1.0);
        let min = synthesize(p.density(), eval_grid(3)).into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min > -1e-3);
    }

    #[test]
    fn gstar_is_the_adjoint(modes in repelling_modes(3), mu in small_density(3), f in coeffs(3), m in coeffs(3)) {
        let kernel = kernel_from(&modes);
        let g = build_g(&mu, &kernel).unwrap();
        let gs = build_gstar(&mu, &kernel).unwrap();
        let f = SpectralFunction::from_coeffs(f).unwrap();
        let m = SpectralFunction::from_coeffs(m).unwrap();
        let lhs = m.coeffs().dot(g.apply(&f).coeffs());
        let rhs = gs.apply(&m).coeffs().dot(f.coeffs());
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn limit_covariance_is_symmetric_psd_and_closed_form(modes in repelling_modes(2)) {
        let k = 2;
        let kernel = kernel_from(&modes);
        let resp = LinearResponse::new(&ProbMeasure::uniform(k), &kernel).unwrap();
        let gs: Vec<SpectralFunction> = (1..basis_len(k))
            .map(|p| {
                let mut c = vec![0.0; basis_len(k)];
                c[p] = 1.0;
                SpectralFunction::from_coeffs(c).unwrap()
            })
            .collect();
        let (c, _) = limit_covariance_matrix(&resp, &gs).unwrap();
        prop_assert!((&c - c.transpose()).amax() < 1e-12);
        prop_assert!(c.clone().symmetric_eigenvalues().min() > 0.0);
        let spectrum = mercer_check(&kernel).unwrap().spectrum;
        for i in 0..gs.len() {
            for j in 0..gs.len() {
                let closed = closed_form_symmetric(&spectrum, &gs[i], &gs[j]).unwrap();
                prop_assert!((c[(i, j)] - closed).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn more_repulsion_less_variance(a in 0.0..3.0f64, da in 0.01..1.0f64) {
        let k = 1;
        let c1 = SpectralFunction::from_coeffs(vec![0.0, 1.0, 0.0]).unwrap();
        let var = |a: f64| {
            let resp = LinearResponse::new(&ProbMeasure::uniform(k), &kernel_from(&[a])).unwrap();
            limit_covariance_matrix(&resp, std::slice::from_ref(&c1)).unwrap().0[(0, 0)]
        };
        prop_assert!(var(a + da) < var(a));
    }

    #[test]
    fn split_seeds_are_distinct(master in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        prop_assume!(i != j);
        prop_assert_ne!(split_seed(master, i), split_seed(master, j));
    }

    #[test]
    fn covariance_and_bootstrap_invariants(data in prop::collection::vec(-5.0..5.0f64, 24), seed in any::<u64>()) {
        let m = DMatrix::from_row_slice(8, 3, &data);
        let c = empirical_covariance(&m).unwrap();
        prop_assert!((&c - c.transpose()).amax() == 0.0);
        prop_assert!(c.clone().symmetric_eigenvalues().min() > -1e-10);
        let ci = bootstrap_ci(&m, 0.95, 50, seed).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!(ci.contains(i, j, c[(i, j)]));
            }
        }
    }
}
