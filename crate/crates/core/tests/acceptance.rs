//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the measured
//! quantities and asserts the stated threshold.

use std::sync::{Arc, OnceLock};

use homog_core::environment::{sample_environment, DistributionSpec, EnvironmentField, Geometry, PsiSpec};
use homog_core::harness::{
    abar_cross_check, expansion_residual, rate_point, run_growth_experiment, run_rate_experiment, verify_tensors,
    ExperimentConfig, Manufactured, Monomial, Polynomial, TensorReport,
};
use homog_core::homogenize::{weighted_average, TorusAnalysis};
use homog_core::lattice::{GridDomain, GridFunction};
use homog_core::operator::{
    apply_l, assemble_adjoint, assemble_corrector, assemble_dirichlet, assemble_resolvent, assemble_resolvent_adjoint,
};
use homog_core::solver::{invariant_density, solve_dense_oracle, solve_iterative, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, name: &str, pass: bool, detail: String) {
    println!("[{id}] {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    eprintln!("[{id}] {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} {name} failed: {detail}");
}

fn tight() -> SolverConfig {
    SolverConfig::with_tol(1e-13)
}

fn random_law(rng: &mut ChaCha8Rng) -> DistributionSpec {
    let kappa = [0.02, 0.05, 0.1, 0.15][rng.gen_range(0..4)];
    if rng.gen_bool(0.5) {
        DistributionSpec::uniform(kappa)
    } else {
        DistributionSpec::two_point(kappa)
    }
}

fn random_field(domain: &Arc<GridDomain>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> GridFunction {
    let v = (0..domain.len()).map(|_| rng.gen_range(lo..hi)).collect();
    GridFunction::new(domain.clone(), v).unwrap()
}

fn diff(a: &GridFunction, b: &GridFunction) -> f64 {
    a.values().iter().zip(b.values()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn c01_exactness_suite() {
    let d = 3;
    let spec = DistributionSpec::constant(vec![1.0, 2.0, 3.0], 0.05);
    let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let env = sample_environment(&spec, d, 7, Geometry::Torus(8)).unwrap();
    let torus = GridDomain::torus(8, d).unwrap();
    let an = TorusAnalysis::compute(&env, &torus, &PsiSpec::first_coefficient(), &SolverConfig::default()).unwrap();
    let corrector_max = an
        .correctors
        .v
        .iter()
        .chain(std::iter::once(&an.correctors.xi))
        .fold(0.0f64, |m, c| m.max(c.field.max_abs()));
    let tensor_max = an.lambda_bar().iter().flatten().chain(&an.eta_bar()).fold(0.0f64, |m, v| m.max(v.abs()));
    let abar_err = an.correctors.a_bar().iter().zip(expect).fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));

    // Affine manufactured solutions are reproduced up to solver tolerance.
    let mut cfg = ExperimentConfig::benchmark(d, vec![4.0, 6.0, 8.0, 12.0]);
    cfg.dist = spec.clone();
    cfg.solver.tol = 1e-12;
    cfg.u_bar = Polynomial {
        terms: vec![
            Monomial { coeff: 1.0, powers: vec![1, 0, 0] },
            Monomial { coeff: -0.5, powers: vec![0, 1, 0] },
            Monomial { coeff: 2.0, powers: vec![0, 0, 1] },
            Monomial { coeff: 0.25, powers: vec![0, 0, 0] },
        ],
    };
    let ms = Manufactured::new(&cfg.u_bar, &expect, 1.0).unwrap();
    let mut affine_err: f64 = 0.0;
    for &r in &cfg.r_list {
        for seed in 0..3 {
            let p = rate_point(&cfg, &ms, r, seed).unwrap();
            assert!(p.converged && p.admitted);
            affine_err = affine_err.max(p.error_max);
        }
    }

    // L applied to affine functions and to x_k².
    let rnd = sample_environment(&DistributionSpec::uniform(0.05), d, 3, Geometry::InfiniteWindow).unwrap();
    let cube = GridDomain::cube(6, d).unwrap();
    let affine = GridFunction::from_fn(cube.clone(), |c| 0.3 + 1.5 * c[0] as f64 - 2.0 * c[1] as f64 + 0.7 * c[2] as f64);
    let la = apply_l(&rnd, &affine).unwrap();
    let affine_identity = cube.interior_indices().fold(0.0f64, |m, i| m.max(la.values()[i].abs()));
    let mut square_identity: f64 = 0.0;
    for k in 0..d {
        let sq = GridFunction::from_fn(cube.clone(), |c| (c[k] * c[k]) as f64);
        let l = apply_l(&rnd, &sq).unwrap();
        for i in cube.interior_indices() {
            square_identity = square_identity.max((l.values()[i] - rnd.a(cube.coords(i))[k]).abs());
        }
    }
    let pass = corrector_max == 0.0
        && tensor_max == 0.0
        && abar_err <= 1e-15
        && affine_err <= 10.0 * cfg.solver.tol
        && affine_identity <= 1e-13
        && square_identity <= 1e-14;
    verdict(
        "C1",
        "exactness suite",
        pass,
        format!(
            "corrector max {corrector_max:e}, tensor max {tensor_max:e}, |ā - a| {abar_err:e}, affine error {affine_err:e}, L(affine) {affine_identity:e}, L(x_k²) - a_k {square_identity:e}"
        ),
    );
}

#[test]
fn c02_oracle_equivalence() {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = tight();
    let mut worst = [0.0f64; 4];
    let instances = 50;
    for side in [3i64, 4] {
        let torus = GridDomain::torus(side, d).unwrap();
        let cube = GridDomain::cube(side, d).unwrap();
        for _ in 0..instances {
            let law = random_law(&mut rng);
            let seed = rng.gen();
            let window = sample_environment(&law, d, seed, Geometry::InfiniteWindow).unwrap();
            let env = sample_environment(&law, d, seed, Geometry::Torus(side)).unwrap();

            let f = random_field(&cube, &mut rng, -1.0, 1.0);
            let g = random_field(&cube, &mut rng, -1.0, 1.0);
            let p = assemble_dirichlet(&window, &cube, &f, &g).unwrap();
            worst[0] = worst[0].max(diff(&solve_iterative(&p, &SolverConfig::default()).unwrap().solution, &solve_dense_oracle(&p).unwrap()));

            let rhs = random_field(&torus, &mut rng, -1.0, 1.0);
            let p = assemble_resolvent(&env, &torus, rng.gen_range(0.05..1.0), &rhs).unwrap();
            worst[1] = worst[1].max(diff(&solve_iterative(&p, &cfg).unwrap().solution, &solve_dense_oracle(&p).unwrap()));

            let p = assemble_adjoint(&env, &torus).unwrap();
            let density = solve_dense_oracle(&p).unwrap();
            worst[3] = worst[3].max(diff(&solve_iterative(&p, &cfg).unwrap().solution, &density));

            let raw = random_field(&torus, &mut rng, -1.0, 1.0);
            let mean = weighted_average(&density, &raw);
            let src = GridFunction::new(torus.clone(), raw.values().iter().map(|v| v - mean).collect()).unwrap();
            let p = assemble_corrector(&env, &torus, &src).unwrap();
            worst[2] = worst[2].max(diff(&solve_iterative(&p, &cfg).unwrap().solution, &solve_dense_oracle(&p).unwrap()));
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-9);
    verdict(
        "C2",
        "oracle equivalence",
        pass,
        format!(
            "{} instances per system; max deviation dirichlet {:.1e}, resolvent {:.1e}, corrector {:.1e}, adjoint {:.1e}",
            2 * instances,
            worst[0],
            worst[1],
            worst[2],
            worst[3]
        ),
    );
}

#[test]
fn c03_maximum_principle() {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tight();
    let slack = 1e-12;
    let mut dirichlet_violations = 0;
    let mut resolvent_violations = 0;
    let mut worst_resolvent = f64::INFINITY;
    for _ in 0..200 {
        let law = random_law(&mut rng);
        let env = sample_environment(&law, d, rng.gen(), Geometry::InfiniteWindow).unwrap();
        let ball = GridDomain::ball(rng.gen_range(3.0..7.0), d).unwrap();
        let g = random_field(&ball, &mut rng, -1.0, 1.0);
        let (lo, hi) = ball.boundary_indices().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(g.values()[i]), hi.max(g.values()[i]))
        });
        let p = assemble_dirichlet(&env, &ball, &GridFunction::zeros(ball.clone()), &g).unwrap();
        let u = solve_iterative(&p, &SolverConfig::with_tol(1e-12)).unwrap().solution;
        if u.values().iter().any(|&v| v < lo - slack || v > hi + slack) {
            dirichlet_violations += 1;
        }
    }
    for _ in 0..200 {
        let law = random_law(&mut rng);
        let side = rng.gen_range(4..9);
        let torus = GridDomain::torus(side, d).unwrap();
        let env = sample_environment(&law, d, rng.gen(), Geometry::Torus(side)).unwrap();
        let rhs = GridFunction::new(
            torus.clone(),
            (0..torus.len()).map(|_| if rng.gen_bool(0.7) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect(),
        )
        .unwrap();
        let p = assemble_resolvent(&env, &torus, rng.gen_range(0.01..1.0), &rhs).unwrap();
        let u = solve_iterative(&p, &cfg).unwrap().solution;
        let min = u.values().iter().cloned().fold(f64::INFINITY, f64::min);
        worst_resolvent = worst_resolvent.min(min);
        if min < -slack {
            resolvent_violations += 1;
        }
    }
    verdict(
        "C3",
        "maximum principle and inverse positivity",
        dirichlet_violations == 0 && resolvent_violations == 0,
        format!(
            "dirichlet violations {dirichlet_violations}/200, resolvent violations {resolvent_violations}/200, smallest resolvent value {worst_resolvent:.2e}"
        ),
    );
}

fn tensor_report() -> &'static TensorReport {
    static REPORT: OnceLock<TensorReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let mut cfg = ExperimentConfig::benchmark(3, vec![8.0, 12.0, 16.0]);
        cfg.psi = PsiSpec::first_coefficient();
        cfg.torus_l = 16;
        cfg.stats_seeds = 200;
        verify_tensors(&cfg).unwrap()
    })
}

#[test]
fn c04_tensor_vanishing_statistical() {
    let r = tensor_report();
    let pass = r.max_abs_z <= 3.0 && r.max_std_err <= 1e-2 && r.stats.sample_count == 200;
    verdict(
        "C4",
        "flux tensors vanish statistically",
        pass,
        format!("{} seeds, max |z| {:.3}, max standard error {:.2e}", r.stats.sample_count, r.max_abs_z, r.max_std_err),
    );
}

#[test]
fn c05_tensor_vanishing_pairing() {
    let r = tensor_report();
    let worst = r
        .pairing
        .iter()
        .map(|p| {
            let eta = p.eta_sums().iter().fold(0.0f64, |m, s| m.max(s.abs() / p.eta_bound.max(f64::MIN_POSITIVE)));
            let lambda = p.lambda_sums().iter().fold(0.0f64, |m, s| m.max(s.abs() / p.lambda_bound.max(f64::MIN_POSITIVE)));
            eta.max(lambda)
        })
        .fold(0.0f64, f64::max);
    verdict(
        "C5",
        "reflection pairing cancels per seed",
        r.pairing_holds && r.pairing.len() == 200,
        format!("{} seeds, worst |sum| / bound {:.2e}", r.pairing.len(), worst),
    );
}

#[test]
fn c06_green_mass_identity() {
    let d = 3;
    let side = 16;
    let torus = GridDomain::torus(side, d).unwrap();
    let cfg = tight();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_row: f64 = 0.0;
    let mut worst_weighted: f64 = 0.0;
    for r in [8.0f64, 16.0] {
        let mass = 1.0 / (r * r);
        for seed in 0..20 {
            let env: EnvironmentField = sample_environment(&DistributionSpec::uniform(0.05), d, seed, Geometry::Torus(side)).unwrap();
            let x = rng.gen_range(0..torus.len());
            let delta = GridFunction::from_fn(torus.clone(), |c| if c == torus.coords(x) { 1.0 } else { 0.0 });
            // Σ_z G(x, z): the row of the kernel through the transposed system.
            let row = solve_iterative(&assemble_resolvent_adjoint(&env, &torus, mass, &delta).unwrap(), &cfg).unwrap();
            let total: f64 = row.solution.values().iter().sum();
            worst_row = worst_row.max((total - r * r).abs() / (r * r));
            // Σ_x m(x) G(x, z) = R² m(z): the column weighted by the invariant density.
            let density = invariant_density(&env, &torus, &cfg).unwrap();
            let col = solve_iterative(&assemble_resolvent(&env, &torus, mass, &delta).unwrap(), &cfg).unwrap();
            let weighted: f64 = col.solution.values().iter().zip(density.values()).map(|(g, m)| g * m).sum();
            let target = r * r * density.values()[x];
            worst_weighted = worst_weighted.max((weighted - target).abs() / target);
        }
    }
    verdict(
        "C6",
        "Green mass identity",
        worst_row <= 1e-8 && worst_weighted <= 1e-8,
        format!("R in {{8, 16}}, 20 seeds; max relative error of row mass {worst_row:.2e}, weighted column mass {worst_weighted:.2e}"),
    );
}

#[test]
fn c07_abar_cross_estimators() {
    let mut cfg = ExperimentConfig::benchmark(3, vec![8.0, 12.0, 16.0]);
    cfg.torus_l = 16;
    let r = abar_cross_check(&cfg).unwrap();
    let fmt = |v: Vec<f64>| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    verdict(
        "C7",
        "ā cross-estimator agreement",
        r.meets_threshold(),
        format!(
            "torus [{}], qclt [{}], chain [{}], max relative gap {:.2}%",
            fmt(r.torus.clone()),
            fmt(r.qclt.iter().map(|e| e.mean).collect()),
            fmt(r.chain.iter().map(|e| e.mean).collect()),
            100.0 * r.max_relative_gap
        ),
    );
}

#[test]
fn c08_growth_laws() {
    let mut cfg = ExperimentConfig::benchmark(3, vec![8.0, 16.0, 32.0]);
    cfg.seeds_per_r = 20;
    let r = run_growth_experiment(&cfg).unwrap();
    verdict(
        "C8",
        "corrector growth laws",
        r.meets_threshold(),
        format!(
            "slopes: corrector {:.3} in [0.2, 0.8], p {:.3} in [1.0, 2.0], grad p {:.3} in [0.2, 0.9]",
            r.corrector.fitted_slope, r.p.fitted_slope, r.grad_p.fitted_slope
        ),
    );
}

#[test]
fn c09_improved_rate() {
    let mut cfg = ExperimentConfig::benchmark(3, vec![8.0, 12.0, 16.0, 24.0, 32.0, 48.0]);
    cfg.seeds_per_r = 20;
    let r3 = run_rate_experiment(&cfg).unwrap();
    let mut smoke = ExperimentConfig::benchmark(4, vec![6.0, 8.0, 12.0]);
    smoke.seeds_per_r = 20;
    let r4 = run_rate_experiment(&smoke).unwrap();
    let admitted = r3.points.iter().chain(&r4.points).all(|p| p.admitted);
    let pass = r3.meets_threshold() && r4.log_corrected && r4.fitted_slope <= -1.2 && admitted;
    verdict(
        "C9",
        "improved homogenization rate",
        pass,
        format!(
            "d=3 slope {:.3}, 95% CI [{:.3}, {:.3}], last window {:.3}; d=4 log-corrected slope {:.3}",
            r3.fitted_slope,
            r3.slope_ci.0,
            r3.slope_ci.1,
            r3.window_slopes.last().map(|w| w.slope).unwrap_or(f64::NAN),
            r4.fitted_slope
        ),
    );
}

#[test]
fn c10_expansion_residual() {
    let cfg = ExperimentConfig::benchmark(3, vec![8.0, 16.0, 32.0]);
    let r = expansion_residual(&cfg).unwrap();
    let converged = r.points.iter().all(|p| p.converged);
    verdict(
        "C10",
        "two-scale expansion residual",
        r.meets_threshold() && converged,
        format!(
            "period {}, residuals {:?}, slope {:.3}, ablated slope {:.3}, degradation {:.3}",
            r.period,
            r.points.iter().map(|p| format!("{:.2e}", p.residual)).collect::<Vec<_>>(),
            r.slope,
            r.slope_ablated,
            r.degradation
        ),
    );
}
