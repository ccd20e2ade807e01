use homog_core::environment::{reflect, sample_environment, DistributionSpec, Geometry, PsiSpec};
use homog_core::harness::{fit_powerlaw, parse_rates_csv, rates_csv, Polynomial, RatePoint, RateReport};
use homog_core::homogenize::{reflection_pairing, Estimate};
use homog_core::lattice::{GridDomain, GridFunction, Site};
use homog_core::operator::{apply_l, assemble_dirichlet};
use homog_core::solver::{solve_iterative, SolverConfig};
use homog_core::walk::{WalkMode, Walker};
use proptest::prelude::*;

fn law(two_point: bool, kappa: f64) -> DistributionSpec {
    if two_point {
        DistributionSpec::two_point(kappa)
    } else {
        DistributionSpec::uniform(kappa)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn operator_kills_affine_functions(seed in any::<u64>(), c in prop::array::uniform4(-5.0f64..5.0), tp in any::<bool>()) {
        let env = sample_environment(&law(tp, 0.05), 3, seed, Geometry::InfiniteWindow).unwrap();
        let dom = GridDomain::cube(4, 3).unwrap();
        let u = GridFunction::from_fn(dom.clone(), |x| c[0] + c[1] * x[0] as f64 + c[2] * x[1] as f64 + c[3] * x[2] as f64);
        let lu = apply_l(&env, &u).unwrap();
        for i in dom.interior_indices() {
            prop_assert!(lu.values()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_solutions_obey_maximum_principle(seed in any::<u64>(), r in 3.0f64..6.0, tp in any::<bool>()) {
        let env = sample_environment(&law(tp, 0.1), 3, seed, Geometry::InfiniteWindow).unwrap();
        let ball = GridDomain::ball(r, 3).unwrap();
        let g = GridFunction::from_fn(ball.clone(), |x| ((x[0] * 7 + x[1] * 3 - x[2]) as f64).sin());
        let p = assemble_dirichlet(&env, &ball, &GridFunction::zeros(ball.clone()), &g).unwrap();
        let u = solve_iterative(&p, &SolverConfig::default()).unwrap();
        prop_assert!(u.converged);
        let (lo, hi) = ball.boundary_indices().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), i| (l.min(g.values()[i]), h.max(g.values()[i])));
        for &v in u.solution.values() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn reflection_pairing_cancels(seed in any::<u64>(), tp in any::<bool>()) {
        let env = sample_environment(&law(tp, 0.05), 3, seed, Geometry::Torus(5)).unwrap();
        let torus = GridDomain::torus(5, 3).unwrap();
        let (_, _, check) = reflection_pairing(&env, &torus, &PsiSpec::first_coefficient(), &SolverConfig::with_tol(1e-12)).unwrap();
        prop_assert!(check.holds());
    }

    #[test]
    fn reflection_is_an_involution(seed in any::<u64>()) {
        let env = sample_environment(&DistributionSpec::uniform(0.05), 2, seed, Geometry::Torus(7)).unwrap();
        let twice = reflect(&reflect(&env));
        for x in -3i64..4 {
            for y in -3i64..4 {
                prop_assert_eq!(env.a(&[x, y]), twice.a(&[x, y]));
                prop_assert_eq!(env.a(&[x, y]), reflect(&env).a(&[-x, -y]));
            }
        }
    }

    #[test]
    fn power_fit_recovers_exponents(k in -3.0f64..3.0, c in 0.01f64..100.0) {
        let pts: Vec<(f64, f64)> = [5.0f64, 9.0, 17.0, 40.0].iter().map(|&r| (r, c * r.powf(k))).collect();
        let fit = fit_powerlaw(&pts, false).unwrap();
        prop_assert!((fit.slope - k).abs() < 1e-10);
        prop_assert!((fit.intercept - c.ln()).abs() < 1e-9);
    }

    #[test]
    fn rates_csv_roundtrip(vals in prop::collection::vec((4.0f64..100.0, any::<u32>(), 0.0f64..1.0, 0.0f64..1.0, 0usize..5000, 0.0f64..1e-6, any::<bool>()), 1..20)) {
        let points: Vec<RatePoint> = vals
            .iter()
            .map(|&(r, seed, e, l2, iters, res, converged)| RatePoint { r, seed: seed as u64, error_max: e, error_l2: l2, iters, residual: res, converged, admitted: converged })
            .collect();
        let report = RateReport {
            experiment: "prop".into(),
            d: 3,
            points: points.clone(),
            fitted_slope: -1.5,
            intercept: 0.0,
            slope_ci: (-1.6, -1.4),
            log_corrected: false,
            a_bar: vec![Estimate { mean: 1.0 / 3.0, std_err: 0.0 }; 3],
            psi_bar: Estimate { mean: 1.0, std_err: 0.0 },
            error_floor: 0.0,
            window_slopes: vec![],
            supported_for_acceptance: true,
            config: homog_core::harness::ExperimentConfig::benchmark(3, vec![8.0, 16.0, 32.0]),
        };
        let parsed = parse_rates_csv(&rates_csv(&report)).unwrap();
        prop_assert_eq!(parsed.len(), points.len());
        for ((name, d, p), q) in parsed.iter().zip(&points) {
            prop_assert_eq!(name.as_str(), "prop");
            prop_assert_eq!(*d, 3);
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn polynomial_derivatives_commute(a in 0usize..3, b in 0usize..3, x in prop::array::uniform3(-2.0f64..2.0)) {
        let p = Polynomial { terms: vec![
            homog_core::harness::Monomial { coeff: 1.5, powers: vec![2, 1, 1] },
            homog_core::harness::Monomial { coeff: -0.5, powers: vec![0, 3, 1] },
        ] };
        let ab = p.derivative(a).derivative(b).eval(&x);
        let ba = p.derivative(b).derivative(a).eval(&x);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn walks_are_reproducible(seed in any::<u64>(), walk in 0u64..100) {
        let env = sample_environment(&DistributionSpec::uniform(0.05), 3, 11, Geometry::Torus(6)).unwrap();
        let torus = GridDomain::torus(6, 3).unwrap();
        let walker = Walker::new(&env, &torus).unwrap();
        let a = walker.simulate(&Site::origin(3), 200, WalkMode::Discrete, seed, walk).unwrap();
        let b = walker.simulate(&Site::origin(3), 200, WalkMode::Discrete, seed, walk).unwrap();
        prop_assert_eq!(a.endpoint.coords(), b.endpoint.coords());
        prop_assert_eq!(a.jumps, b.jumps);
    }
}
