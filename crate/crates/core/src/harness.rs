//! End-to-end experiments: manufactured-solution rate sweeps, flux-tensor
//! verification, two-scale expansion residuals, corrector growth sweeps,
//! cross-estimation of `ā`, power-law fitting and report emission.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::environment::{sample_environment, DistName, DistributionSpec, EnvironmentField, Geometry, PsiKind, PsiSpec};
use crate::error::{Error, Result};
use crate::homogenize::{
    ball_max, centered_flux, corrector_torus, effective_stats, growth_from_amplitudes, higher_corrector,
    reflection_pairing, weighted_average, CorrectorTarget, EffectiveStats, Estimate, GrowthProfile, GrowthReference,
    HigherKind, PairingCheck, TorusAnalysis,
};
use crate::lattice::{GridDomain, GridFunction, Site};
use crate::operator::{apply_l, assemble_dirichlet};
use crate::solver::{invariant_density, solve_iterative, SolverConfig};
use crate::walk::{qclt_estimate, QcltEstimate, WalkMode, Walker};

// ---------------------------------------------------------------------------
// Power-law fits

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval of the slope from the regression residuals.
    pub ci: (f64, f64),
    pub log_corrected: bool,
    pub n_points: usize,
}

/// Least squares on `(log R, log v)`, or on `(log R, log(v / log R))` with
/// `log_correction`.
pub fn fit_powerlaw(points: &[(f64, f64)], log_correction: bool) -> Result<PowerFit> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 distinct R, got {}", distinct.len())));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(r, v) in points {
        if !(v > 0.0) || !v.is_finite() || !(r > 0.0) {
            return Err(Error::InvalidData(format!("nonpositive point ({r}, {v})")));
        }
        let y = if log_correction {
            if r <= 1.0 {
                return Err(Error::InvalidData(format!("log correction needs R > 1, got {r}")));
            }
            (v / r.ln()).ln()
        } else {
            v.ln()
        };
        xs.push(r.ln());
        ys.push(y);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidData(e.to_string()))?.inverse_cdf(0.975);
    Ok(PowerFit { slope, intercept, ci: (slope - t * se, slope + t * se), log_corrected: log_correction, n_points: points.len() })
}

// ---------------------------------------------------------------------------
// Polynomials and manufactured solutions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

/// A polynomial on `R^d` as a list of monomials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn monomial(coeff: f64, powers: Vec<u32>) -> Polynomial {
        Polynomial { terms: vec![Monomial { coeff, powers }] }
    }

    /// `x_1³ x_2` in dimension `d`.
    pub fn cubic_benchmark(d: usize) -> Polynomial {
        let mut powers = vec![0; d];
        powers[0] = 3;
        powers[1] = 1;
        Polynomial::monomial(1.0, powers)
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.powers.iter().sum()).max().unwrap_or(0)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let Some(t) = self.terms.iter().find(|t| t.powers.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, actual: t.powers.len() });
        }
        if self.degree() > 4 {
            return Err(Error::InvalidParameter(format!("polynomial degree {} exceeds 4", self.degree())));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * t.powers.iter().zip(x).map(|(&p, &xi)| xi.powi(p as i32)).product::<f64>())
            .sum()
    }

    pub fn derivative(&self, axis: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.powers[axis] > 0)
            .map(|t| {
                let mut powers = t.powers.clone();
                powers[axis] -= 1;
                Monomial { coeff: t.coeff * t.powers[axis] as f64, powers }
            })
            .collect();
        Polynomial { terms }
    }

    pub fn derivative_multi(&self, axes: &[usize]) -> Polynomial {
        axes.iter().fold(self.clone(), |p, &a| p.derivative(a))
    }

    pub fn scaled(&self, s: f64) -> Polynomial {
        Polynomial { terms: self.terms.iter().map(|t| Monomial { coeff: t.coeff * s, powers: t.powers.clone() }).collect() }
    }

    pub fn sum(parts: impl IntoIterator<Item = Polynomial>) -> Polynomial {
        Polynomial { terms: parts.into_iter().flat_map(|p| p.terms).collect() }
    }
}

/// `ū`, the derived source `f = tr(ā D²ū) / (2 ψ̄)` and the derivative
/// tensors the expansion needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Manufactured {
    pub d: usize,
    pub u_bar: Polynomial,
    pub a_bar: Vec<f64>,
    pub psi_bar: f64,
    pub f: Polynomial,
    /// `∂_kk ū`.
    pub hessian_diag: Vec<Polynomial>,
    /// `∂_kki ū`, indexed `k * d + i`.
    pub third: Vec<Polynomial>,
    /// `∂_i f`.
    pub grad_f: Vec<Polynomial>,
}

impl Manufactured {
    pub fn new(u_bar: &Polynomial, a_bar: &[f64], psi_bar: f64) -> Result<Manufactured> {
        let d = a_bar.len();
        u_bar.validate(d)?;
        if psi_bar == 0.0 || !psi_bar.is_finite() {
            return Err(Error::InvalidParameter(format!("psi_bar = {psi_bar} cannot normalise the source")));
        }
        let hessian_diag: Vec<Polynomial> = (0..d).map(|k| u_bar.derivative_multi(&[k, k])).collect();
        let f = Polynomial::sum(hessian_diag.iter().zip(a_bar).map(|(h, a)| h.scaled(a / (2.0 * psi_bar))));
        let third = (0..d * d).map(|ki| u_bar.derivative_multi(&[ki / d, ki / d, ki % d])).collect();
        let grad_f = (0..d).map(|i| f.derivative(i)).collect();
        Ok(Manufactured { d, u_bar: u_bar.clone(), a_bar: a_bar.to_vec(), psi_bar, f, hessian_diag, third, grad_f })
    }
}

fn scaled(c: &[i64], r: f64) -> Vec<f64> {
    c.iter().map(|&x| x as f64 / r).collect()
}

// ---------------------------------------------------------------------------
// Configuration

/// Where the homogenized coefficients used in the manufactured source come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ABarSource {
    #[default]
    /// `I/d` for axis-exchangeable laws, the diagonal itself for constant
    /// laws, otherwise a torus estimate.
    Auto,
    /// Torus ensemble estimate with `stats_seeds` seeds on `torus_L`.
    Estimate,
    Explicit { values: Vec<f64>, psi_bar: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub n_walks: usize,
    pub horizon: u64,
    pub chain_walks: usize,
    pub chain_steps: u64,
    /// Continuous-time walks (`walk` subcommand only).
    pub continuous: bool,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig { n_walks: 20_000, horizon: 4096, chain_walks: 16, chain_steps: 1_000_000, continuous: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Period of the environment.
    pub period: i64,
    /// Solver tolerance for every solve of the expansion; for the Dirichlet
    /// solves it bounds the sup-norm error.
    pub tol: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig { period: 4, tol: 1e-9 }
    }
}

/// How `λ̄` is chosen when centring the higher-order corrector source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaBarChoice {
    /// The density-weighted average on the same torus.
    Torus,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthConfig {
    /// Torus side as a multiple of `R`.
    pub torus_factor: f64,
    pub min_side: i64,
    pub kind: HigherKind,
    pub lambda_bar: LambdaBarChoice,
    /// Corrector index `k` and flux direction `j` of `p^k_j`.
    pub k: usize,
    pub j: usize,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig { torus_factor: 2.0, min_side: 16, kind: HigherKind::Stationary, lambda_bar: LambdaBarChoice::Torus, k: 0, j: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> usize {
    20
}
fn default_torus() -> i64 {
    16
}
fn default_stats_seeds() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub d: usize,
    #[serde(rename = "R_list")]
    pub r_list: Vec<f64>,
    #[serde(rename = "seeds_per_R", default = "default_seeds")]
    pub seeds_per_r: usize,
    /// First environment seed; seed index `s` uses `seed + s`.
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub dist: DistributionSpec,
    #[serde(default)]
    pub psi: PsiSpec,
    pub u_bar: Polynomial,
    #[serde(default)]
    pub a_bar: ABarSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(rename = "torus_L", default = "default_torus")]
    pub torus_l: i64,
    #[serde(default = "default_stats_seeds")]
    pub stats_seeds: usize,
    /// Fit `log(error / log R)`; defaults to on for `d >= 4`.
    #[serde(default)]
    pub log_correction: Option<bool>,
    #[serde(default)]
    pub walk: WalkConfig,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    #[serde(default)]
    pub growth: GrowthConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// A d-dimensional uniform-law configuration with the cubic benchmark `ū`.
    pub fn benchmark(d: usize, r_list: Vec<f64>) -> ExperimentConfig {
        ExperimentConfig {
            name: "rates".into(),
            d,
            r_list,
            seeds_per_r: default_seeds(),
            seed: 0,
            dist: DistributionSpec::uniform(0.05),
            psi: PsiSpec::default(),
            u_bar: Polynomial::cubic_benchmark(d),
            a_bar: ABarSource::Auto,
            solver: SolverConfig::default(),
            torus_l: default_torus(),
            stats_seeds: default_stats_seeds(),
            log_correction: None,
            walk: WalkConfig::default(),
            expansion: ExpansionConfig::default(),
            growth: GrowthConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!("d = {} must be at least 2", self.d)));
        }
        if self.r_list.iter().any(|&r| !(r >= 4.0)) {
            return Err(Error::InvalidParameter("every R must be at least 4".into()));
        }
        if self.r_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("R_list must be strictly increasing".into()));
        }
        if self.seeds_per_r == 0 {
            return Err(Error::InvalidParameter("seeds_per_R must be positive".into()));
        }
        self.dist.validate(self.d)?;
        self.u_bar.validate(self.d)?;
        self.solver.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.seeds_per_r as u64).map(|s| self.seed + s).collect()
    }

    pub fn uses_log_correction(&self) -> bool {
        self.log_correction.unwrap_or(self.d >= 4)
    }
}

// ---------------------------------------------------------------------------
// Homogenized coefficients for the manufactured source

/// `ā` and `ψ̄` with standard errors, as configured.
pub fn resolve_effective(config: &ExperimentConfig) -> Result<(Vec<Estimate>, Estimate)> {
    let d = config.d;
    let exact = |v: f64| Estimate { mean: v, std_err: 0.0 };
    let estimate = || -> Result<(Vec<Estimate>, Estimate)> {
        let seeds: Vec<u64> = (0..config.stats_seeds as u64).map(|s| config.seed + s).collect();
        let stats = effective_stats(&config.dist, &config.psi, d, config.torus_l, &seeds, &config.solver)?;
        Ok((stats.a_bar, stats.psi_bar))
    };
    let psi_from = |a: &[Estimate]| -> Option<Estimate> {
        match config.psi.kind {
            PsiKind::ConstantOne => Some(exact(1.0)),
            PsiKind::FirstCoefficient => Some(a[0]),
            PsiKind::CustomBounded => None,
        }
    };
    match &config.a_bar {
        ABarSource::Explicit { values, psi_bar } => {
            if values.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: values.len() });
            }
            Ok((values.iter().map(|&v| exact(v)).collect(), exact(*psi_bar)))
        }
        ABarSource::Estimate => estimate(),
        ABarSource::Auto => {
            let known: Option<Vec<f64>> = match config.dist.dist {
                DistName::Constant => config.dist.validate(d).ok().and_then(|_| {
                    let diag = config.dist.params.diag.clone()?;
                    let tr: f64 = diag.iter().sum();
                    Some(diag.iter().map(|w| w / tr).collect())
                }),
                _ if config.dist.is_exchangeable() => Some(vec![1.0 / d as f64; d]),
                _ => None,
            };
            match known.map(|a| a.into_iter().map(exact).collect::<Vec<_>>()) {
                Some(a) => match psi_from(&a) {
                    Some(p) => Ok((a, p)),
                    None => estimate().map(|(_, p)| (a, p)),
                },
                None => estimate(),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rate experiment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    #[serde(rename = "R")]
    pub r: f64,
    pub seed: u64,
    pub error_max: f64,
    pub error_l2: f64,
    pub iters: usize,
    pub residual: f64,
    pub converged: bool,
    /// Converged and within the maximum-principle bound.
    pub admitted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSlope {
    pub r_values: Vec<f64>,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub experiment: String,
    pub d: usize,
    pub points: Vec<RatePoint>,
    pub fitted_slope: f64,
    pub intercept: f64,
    /// 95% bootstrap interval over environment seeds.
    pub slope_ci: (f64, f64),
    pub log_corrected: bool,
    pub a_bar: Vec<Estimate>,
    pub psi_bar: Estimate,
    /// Error attributable to the uncertainty of `ā`: `½ Σ_i se(ā_i) max |∂_ii ū|`.
    pub error_floor: f64,
    pub window_slopes: Vec<WindowSlope>,
    /// False for `d = 2`, where no improvement over `R^{-1}` is expected.
    pub supported_for_acceptance: bool,
    pub config: ExperimentConfig,
}

impl RateReport {
    /// Slope at most `-1.2` with a confidence interval excluding `-1`.
    pub fn meets_threshold(&self) -> bool {
        self.fitted_slope <= -1.2 && !(self.slope_ci.0 <= -1.0 && -1.0 <= self.slope_ci.1)
    }
}

/// Solves one manufactured Dirichlet problem and measures the error against `ū(x/R)`.
pub fn rate_point(config: &ExperimentConfig, ms: &Manufactured, r: f64, seed: u64) -> Result<RatePoint> {
    let d = config.d;
    let env = sample_environment(&config.dist, d, seed, Geometry::InfiniteWindow)?;
    let dom = GridDomain::ball(r, d)?;
    let a = env.a_table(&dom)?;
    let r2 = r * r;
    let mut f = vec![0.0; dom.len()];
    let mut g = vec![0.0; dom.len()];
    for i in 0..dom.len() {
        let y = scaled(dom.coords(i), r);
        g[i] = ms.u_bar.eval(&y);
        if dom.is_interior(i) {
            f[i] = ms.f.eval(&y) / r2 * config.psi.of_a(&a[i * d..(i + 1) * d]);
        }
    }
    let f = GridFunction::new(dom.clone(), f)?;
    let g = GridFunction::new(dom.clone(), g)?;
    let problem = assemble_dirichlet(&env, &dom, &f, &g)?;
    let out = solve_iterative(&problem, &config.solver)?;
    let u = out.solution.values();
    let mut error_max: f64 = 0.0;
    let mut sq = 0.0;
    for i in 0..dom.len() {
        let e = (u[i] - g.values()[i]).abs();
        if crate::lattice::norm(dom.coords(i)) < r {
            error_max = error_max.max(e);
        }
        if dom.is_interior(i) {
            sq += e * e;
        }
    }
    let g_max = dom.boundary_indices().fold(0.0f64, |m, i| m.max(g.values()[i].abs()));
    let bound = (g_max + (r + 1.0).powi(2) * f.max_abs()) * (1.0 + 1e-12);
    let admitted = out.converged && out.solution.max_abs() <= bound;
    Ok(RatePoint {
        r,
        seed,
        error_max,
        error_l2: (sq / dom.interior_count() as f64).sqrt(),
        iters: out.iterations,
        residual: out.residual_inf,
        converged: out.converged,
        admitted,
    })
}

const BOOTSTRAP_REPS: usize = 2000;

pub fn run_rate_experiment(config: &ExperimentConfig) -> Result<RateReport> {
    config.validate()?;
    let (a_bar, psi_bar) = resolve_effective(config)?;
    let means: Vec<f64> = a_bar.iter().map(|e| e.mean).collect();
    let ms = Manufactured::new(&config.u_bar, &means, psi_bar.mean)?;
    let seeds = config.seeds();
    let cells: Vec<(f64, u64)> = config.r_list.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let results: Vec<Result<RatePoint>> = cells.par_iter().map(|&(r, s)| rate_point(config, &ms, r, s)).collect();
    let mut points = Vec::with_capacity(cells.len());
    for ((r, s), res) in cells.iter().zip(results) {
        points.push(res.unwrap_or(RatePoint {
            r: *r,
            seed: *s,
            error_max: f64::NAN,
            error_l2: f64::NAN,
            iters: 0,
            residual: f64::NAN,
            converged: false,
            admitted: false,
        }));
    }
    let log_corrected = config.uses_log_correction();
    let usable: Vec<(f64, f64)> = points.iter().filter(|p| p.admitted && p.error_max > 0.0).map(|p| (p.r, p.error_max)).collect();
    let fit = fit_powerlaw(&usable, log_corrected).map_err(|e| Error::Experiment(format!("rate fit failed: {e}")))?;
    let slope_ci = bootstrap_slope(&points, &seeds, log_corrected, config.seed);
    let window_slopes = config
        .r_list
        .windows(3)
        .filter_map(|w| {
            let pts: Vec<(f64, f64)> = usable.iter().cloned().filter(|p| w.contains(&p.0)).collect();
            fit_powerlaw(&pts, log_corrected).ok().map(|f| WindowSlope { r_values: w.to_vec(), slope: f.slope })
        })
        .collect();
    let error_floor = 0.5
        * a_bar
            .iter()
            .zip(&ms.hessian_diag)
            .map(|(e, h)| e.std_err * poly_max_on_ball(h, config.d))
            .sum::<f64>();
    Ok(RateReport {
        experiment: config.name.clone(),
        d: config.d,
        points,
        fitted_slope: fit.slope,
        intercept: fit.intercept,
        slope_ci,
        log_corrected,
        a_bar,
        psi_bar,
        error_floor,
        window_slopes,
        supported_for_acceptance: config.d >= 3,
        config: config.clone(),
    })
}

/// Resamples seed indices jointly across all `R` and refits the slope.
fn bootstrap_slope(points: &[RatePoint], seeds: &[u64], log_corrected: bool, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007_5eed);
    let mut slopes = Vec::with_capacity(BOOTSTRAP_REPS);
    for _ in 0..BOOTSTRAP_REPS {
        let mut pts = Vec::with_capacity(points.len());
        for _ in 0..seeds.len() {
            let s = seeds[rng.gen_range(0..seeds.len())];
            pts.extend(points.iter().filter(|p| p.seed == s && p.admitted && p.error_max > 0.0).map(|p| (p.r, p.error_max)));
        }
        if let Ok(f) = fit_powerlaw(&pts, log_corrected) {
            slopes.push(f.slope);
        }
    }
    if slopes.is_empty() {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    slopes.sort_by(f64::total_cmp);
    let q = |p: f64| slopes[((p * (slopes.len() - 1) as f64).round() as usize).min(slopes.len() - 1)];
    (q(0.025), q(0.975))
}

/// Crude `max_{|y| <= 1} |p(y)|` on a grid of the unit cube restricted to the ball.
fn poly_max_on_ball(p: &Polynomial, d: usize) -> f64 {
    let steps = if d <= 3 { 10 } else { 6 };
    let mut best: f64 = 0.0;
    let total = (2 * steps + 1usize).pow(d as u32);
    for code in 0..total {
        let mut c = code;
        let y: Vec<f64> = (0..d)
            .map(|_| {
                let k = (c % (2 * steps + 1)) as f64 - steps as f64;
                c /= 2 * steps + 1;
                k / steps as f64
            })
            .collect();
        if y.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            best = best.max(p.eval(&y).abs());
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Flux tensors

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub stats: EffectiveStats,
    /// z-scores of `λ̄^k_j` (row-major `k, j`) followed by those of `η̄_j`.
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    pub max_std_err: f64,
    pub pairing: Vec<PairingCheck>,
    pub pairing_holds: bool,
}

impl TensorReport {
    pub fn meets_threshold(&self) -> bool {
        self.max_abs_z <= 3.0 && self.max_std_err <= 1e-2 && self.pairing_holds
    }
}

/// Ensemble z-scores of the flux tensors and the per-seed reflection pairing.
pub fn verify_tensors(config: &ExperimentConfig) -> Result<TensorReport> {
    config.dist.validate(config.d)?;
    let (d, side) = (config.d, config.torus_l);
    let torus = GridDomain::torus(side, d)?;
    let seeds: Vec<u64> = (0..config.stats_seeds as u64).map(|s| config.seed + s).collect();
    let results: Vec<Result<_>> = seeds
        .par_iter()
        .map(|&s| {
            let env = sample_environment(&config.dist, d, s, Geometry::Torus(side))?;
            let (original, _, check) = reflection_pairing(&env, &torus, &config.psi, &config.solver)?;
            Ok((original.sample(s), check))
        })
        .collect();
    let mut samples = Vec::new();
    let mut pairing = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in seeds.iter().zip(results) {
        match r {
            Ok((sample, check)) => {
                samples.push(sample);
                pairing.push(check);
            }
            Err(e) => failures.push(crate::homogenize::SeedFailure { seed: *s, error: e.to_string() }),
        }
    }
    let stats = EffectiveStats::from_samples(d, side, samples, failures)?;
    let all: Vec<Estimate> = stats.lambda_bar.iter().flatten().chain(&stats.eta_bar).cloned().collect();
    let z_scores: Vec<f64> = all.iter().map(Estimate::z_score).collect();
    let max_abs_z = nan_max(z_scores.iter().map(|z| z.abs()));
    let max_std_err = nan_max(all.iter().map(|e| e.std_err));
    let pairing_holds = pairing.iter().all(PairingCheck::holds) && stats.failures.is_empty();
    Ok(TensorReport { stats, z_scores, max_abs_z, max_std_err, pairing, pairing_holds })
}

/// Maximum that treats NaN as infinitely large.
fn nan_max(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x) })
}

// ---------------------------------------------------------------------------
// Two-scale expansion residual

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPoint {
    #[serde(rename = "R")]
    pub r: f64,
    /// `‖L_ω w‖∞` over the interior of the ball of radius `R/2`.
    pub residual: f64,
    /// The same with the `p` and `s` terms removed from `w`.
    pub residual_ablated: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub period: i64,
    pub seed: u64,
    pub a_bar: Vec<f64>,
    pub psi_bar: f64,
    pub lambda_bar: Vec<Vec<f64>>,
    pub eta_bar: Vec<f64>,
    pub points: Vec<ExpansionPoint>,
    pub slope: f64,
    pub slope_ablated: f64,
    /// `slope_ablated - slope`.
    pub degradation: f64,
}

impl ExpansionReport {
    pub fn meets_threshold(&self) -> bool {
        self.slope <= -3.0 && self.degradation >= 0.5
    }
}

/// Builds the two-scale expansion `w` on a periodic environment and measures
/// `L_ω w` for each radius of the configuration.
pub fn expansion_residual(config: &ExperimentConfig) -> Result<ExpansionReport> {
    config.validate()?;
    let d = config.d;
    let period = config.expansion.period;
    let env = sample_environment(&config.dist, d, config.seed, Geometry::Torus(period))?;
    let torus = GridDomain::torus(period, d)?;
    let tight = SolverConfig { tol: config.expansion.tol, ..config.solver.clone() };
    let an = TorusAnalysis::compute(&env, &torus, &config.psi, &tight)?;
    let a_bar = an.correctors.a_bar();
    let psi_bar = an.correctors.psi_bar();
    let lambda_bar = an.lambda_bar();
    let eta_bar = an.eta_bar();
    let ms = Manufactured::new(&config.u_bar, &a_bar, psi_bar)?;
    let points = config
        .r_list
        .iter()
        .map(|&r| expansion_point(&env, &an, &ms, &lambda_bar, &eta_bar, r, &config.psi, &tight))
        .collect::<Result<Vec<_>>>()?;
    let fit = |sel: fn(&ExpansionPoint) -> f64| {
        fit_powerlaw(&points.iter().map(|p| (p.r, sel(p))).collect::<Vec<_>>(), false)
    };
    let slope = fit(|p| p.residual)?.slope;
    let slope_ablated = fit(|p| p.residual_ablated)?.slope;
    Ok(ExpansionReport {
        period,
        seed: config.seed,
        a_bar,
        psi_bar,
        lambda_bar,
        eta_bar,
        points,
        slope,
        slope_ablated,
        degradation: slope_ablated - slope,
    })
}

#[allow(clippy::too_many_arguments)]
fn expansion_point(
    env: &EnvironmentField,
    an: &TorusAnalysis,
    ms: &Manufactured,
    lambda_bar: &[Vec<f64>],
    eta_bar: &[f64],
    r: f64,
    psi: &PsiSpec,
    config: &SolverConfig,
) -> Result<ExpansionPoint> {
    let d = ms.d;
    let torus = an.correctors.domain.clone();
    let dom = GridDomain::ball(r, d)?;
    let a = env.a_table(&dom)?;
    let r2 = r * r;
    let n = dom.len();
    let ys: Vec<Vec<f64>> = (0..n).map(|i| scaled(dom.coords(i), r)).collect();
    let on_torus = |f: &GridFunction, i: usize| f.values()[torus.index_of(dom.coords(i)).expect("torus wraps")];

    // u: L u = R^{-2} f(x/R) ψ, u = ū(x/R) on the boundary.
    let mut f_vals = vec![0.0; n];
    let mut g_vals = vec![0.0; n];
    let mut z_rhs = vec![0.0; n];
    for i in 0..n {
        g_vals[i] = ms.u_bar.eval(&ys[i]);
        if dom.is_interior(i) {
            f_vals[i] = ms.f.eval(&ys[i]) / r2 * psi.of_a(&a[i * d..(i + 1) * d]);
            let mut s = 0.0;
            for k in 0..d {
                for j in 0..d {
                    s += 0.5 * lambda_bar[k][j] * ms.third[k * d + j].eval(&ys[i]);
                }
            }
            for j in 0..d {
                s -= 0.5 * eta_bar[j] * ms.grad_f[j].eval(&ys[i]);
            }
            z_rhs[i] = s / r2;
        }
    }
    let zero = GridFunction::zeros(dom.clone());
    let u = solve_iterative(
        &assemble_dirichlet(env, &dom, &GridFunction::new(dom.clone(), f_vals)?, &GridFunction::new(dom.clone(), g_vals)?)?,
        config,
    )?;
    let z = solve_iterative(&assemble_dirichlet(env, &dom, &GridFunction::new(dom.clone(), z_rhs)?, &zero)?, config)?;

    // p^k_j and s_j from the periodic fluxes.
    let p: Vec<GridFunction> = (0..d * d)
        .map(|kj| higher_corrector(env, r, &an.flux.lambda[kj / d][kj % d], lambda_bar[kj / d][kj % d], HigherKind::Stationary, config))
        .collect::<Result<_>>()?;
    let s: Vec<GridFunction> = (0..d)
        .map(|j| higher_corrector(env, r, &an.flux.eta[j], eta_bar[j], HigherKind::Stationary, config))
        .collect::<Result<_>>()?;

    let mut w = vec![0.0; n];
    let mut w_ablated = vec![0.0; n];
    for i in 0..n {
        let y = &ys[i];
        let mut first = 0.0;
        for k in 0..d {
            first += on_torus(&an.correctors.v[k].field, i) * ms.hessian_diag[k].eval(y);
        }
        first -= ms.f.eval(y) * on_torus(&an.correctors.xi.field, i);
        let mut second = 0.0;
        for k in 0..d {
            for j in 0..d {
                second += ms.third[k * d + j].eval(y) * on_torus(&p[k * d + j], i);
            }
        }
        for j in 0..d {
            second -= ms.grad_f[j].eval(y) * on_torus(&s[j], i);
        }
        let base = u.solution.values()[i] - ms.u_bar.eval(y) - z.solution.values()[i] / r + first / r2;
        w_ablated[i] = base;
        w[i] = base - 0.5 * second / (r2 * r);
    }
    let lw = apply_l(env, &GridFunction::new(dom.clone(), w)?)?;
    let lw_ablated = apply_l(env, &GridFunction::new(dom.clone(), w_ablated)?)?;
    let inner = dom.within_inner_ball(r / 2.0);
    Ok(ExpansionPoint {
        r,
        residual: lw.max_abs_over(&inner),
        residual_ablated: lw_ablated.max_abs_over(&inner),
        iterations: u.iterations,
        converged: u.converged && z.converged,
    })
}

// ---------------------------------------------------------------------------
// Growth of correctors and higher-order correctors

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthSample {
    pub seed: u64,
    #[serde(rename = "R")]
    pub r: f64,
    pub side: i64,
    /// `max_{B_R} |v^k - v^k(0)|`.
    pub corrector: f64,
    /// `max_{B_R} |p^k_j|`.
    pub p: f64,
    /// `max_{B_R} max_e |p(x + e) - p(x)|`.
    pub grad_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub d: usize,
    pub samples: Vec<GrowthSample>,
    pub corrector: GrowthProfile,
    pub p: GrowthProfile,
    pub grad_p: GrowthProfile,
    pub config: GrowthConfig,
}

impl GrowthReport {
    pub fn meets_threshold(&self) -> bool {
        (0.2..=0.8).contains(&self.corrector.fitted_slope)
            && (1.0..=2.0).contains(&self.p.fitted_slope)
            && (0.2..=0.9).contains(&self.grad_p.fitted_slope)
    }
}

fn max_gradient_over(field: &GridFunction, r: f64) -> f64 {
    let dom = field.domain();
    let v = field.values();
    let mut best: f64 = 0.0;
    for i in 0..dom.len() {
        let inside = if dom.is_torus() { dom.centered_norm(i) < r } else { crate::lattice::norm(dom.coords(i)) < r };
        if !inside {
            continue;
        }
        for dir in 0..2 * dom.dim() {
            if let Some(t) = dom.neighbor(i, dir) {
                best = best.max((v[t] - v[i]).abs());
            }
        }
    }
    best
}

/// Amplitudes of `v^k`, `p^k_j` and `∇p^k_j` for one seed and radius.
pub fn growth_sample(config: &ExperimentConfig, r: f64, seed: u64) -> Result<GrowthSample> {
    let g = &config.growth;
    let d = config.d;
    if g.k >= d || g.j >= d {
        return Err(Error::InvalidParameter(format!("flux component ({}, {}) out of range", g.k, g.j)));
    }
    let side = ((g.torus_factor * r).round() as i64).max(g.min_side);
    let env = sample_environment(&config.dist, d, seed, Geometry::Torus(side))?;
    let torus = GridDomain::torus(side, d)?;
    let density = invariant_density(&env, &torus, &config.solver)?;
    let v = corrector_torus(&env, &torus, &density, &CorrectorTarget::Coefficient(g.k), &config.solver)?;
    let origin = v.field.values()[0];
    let shifted = GridFunction::new(torus.clone(), v.field.values().iter().map(|x| x - origin).collect())?;
    let lambda = centered_flux(&env, &v.field, g.j)?;
    let bar = match g.lambda_bar {
        LambdaBarChoice::Torus => weighted_average(&density, &lambda),
        LambdaBarChoice::Zero => 0.0,
    };
    let p = higher_corrector(&env, r, &lambda, bar, g.kind, &config.solver)?;
    Ok(GrowthSample {
        seed,
        r,
        side,
        corrector: ball_max(&shifted, r),
        p: ball_max(&p, r),
        grad_p: max_gradient_over(&p, r),
    })
}

/// Seed-averaged amplitudes per radius, fitted against the reference growth laws.
pub fn run_growth_experiment(config: &ExperimentConfig) -> Result<GrowthReport> {
    config.validate()?;
    let seeds = config.seeds();
    let cells: Vec<(f64, u64)> = config.r_list.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let samples = cells.par_iter().map(|&(r, s)| growth_sample(config, r, s)).collect::<Result<Vec<_>>>()?;
    let mean_of = |sel: fn(&GrowthSample) -> f64| -> Vec<f64> {
        config
            .r_list
            .iter()
            .map(|&r| {
                let xs: Vec<f64> = samples.iter().filter(|s| s.r == r).map(sel).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect()
    };
    let d = config.d;
    Ok(GrowthReport {
        d,
        corrector: growth_from_amplitudes(&config.r_list, mean_of(|s| s.corrector), GrowthReference::Mu, d)?,
        p: growth_from_amplitudes(&config.r_list, mean_of(|s| s.p), GrowthReference::Gamma, d)?,
        grad_p: growth_from_amplitudes(&config.r_list, mean_of(|s| s.grad_p), GrowthReference::GammaTilde, d)?,
        samples,
        config: config.growth.clone(),
    })
}

// ---------------------------------------------------------------------------
// Cross-estimation of ā

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ABarCrossReport {
    pub seed: u64,
    pub side: i64,
    /// Density-weighted torus average.
    pub torus: Vec<f64>,
    /// Diagonal of the walk covariance.
    pub qclt: Vec<Estimate>,
    pub qclt_full: QcltEstimate,
    /// Occupation average of `a` along long walks.
    pub chain: Vec<Estimate>,
    /// Largest pairwise relative difference among the three estimators.
    pub max_relative_gap: f64,
}

impl ABarCrossReport {
    pub fn meets_threshold(&self) -> bool {
        self.max_relative_gap <= 0.05
    }
}

pub fn abar_cross_check(config: &ExperimentConfig) -> Result<ABarCrossReport> {
    config.dist.validate(config.d)?;
    let (d, side, seed) = (config.d, config.torus_l, config.seed);
    let env = sample_environment(&config.dist, d, seed, Geometry::Torus(side))?;
    let torus = GridDomain::torus(side, d)?;
    let density = invariant_density(&env, &torus, &config.solver)?;
    let a = env.a_table(&torus)?;
    let torus_avg: Vec<f64> = (0..d)
        .map(|k| weighted_average(&density, &GridFunction::new(torus.clone(), a.iter().skip(k).step_by(d).cloned().collect()).unwrap()))
        .collect();
    let w = &config.walk;
    let walk_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let q = qclt_estimate(&env, &torus, w.n_walks, w.horizon, walk_seed)?;
    let qclt: Vec<Estimate> = (0..d).map(|k| Estimate { mean: q.entry(k, k), std_err: q.standard_errors[k * d + k] }).collect();
    let walker = Walker::new(&env, &torus)?;
    let chain_runs: Vec<Vec<f64>> = (0..w.chain_walks as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let s = walker.simulate(&Site::origin(d), w.chain_steps, WalkMode::Discrete, walk_seed ^ 0xc4a1, i)?;
            (0..d).map(|k| walker.running_average(&s, |ak| ak[k])).collect()
        })
        .collect::<Result<_>>()?;
    let chain: Vec<Estimate> = (0..d).map(|k| Estimate::from_samples(&chain_runs.iter().map(|r| r[k]).collect::<Vec<_>>())).collect();
    let mut gap: f64 = 0.0;
    for k in 0..d {
        let vals = [torus_avg[k], qclt[k].mean, chain[k].mean];
        for x in 0..3 {
            for y in x + 1..3 {
                gap = gap.max((vals[x] - vals[y]).abs() / vals[x].abs().min(vals[y].abs()));
            }
        }
    }
    Ok(ABarCrossReport { seed, side, torus: torus_avg, qclt, qclt_full: q, chain, max_relative_gap: gap })
}

// ---------------------------------------------------------------------------
// Reports

pub const RATES_CSV_HEADER: &str = "experiment,d,R,seed,error_max,error_l2,iters,residual,converged";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn rates_csv(report: &RateReport) -> String {
    let mut out = String::from(RATES_CSV_HEADER);
    out.push('\n');
    for p in &report.points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            report.experiment, report.d, p.r, p.seed, p.error_max, p.error_l2, p.iters, p.residual, p.converged
        )
        .expect("writing to a string");
    }
    out
}

/// Parses rows written by [`rates_csv`]; `admitted` is taken equal to `converged`.
pub fn parse_rates_csv(text: &str) -> Result<Vec<(String, usize, RatePoint)>> {
    let mut lines = text.lines();
    if lines.next() != Some(RATES_CSV_HEADER) {
        return Err(Error::InvalidData("unexpected rates CSV header".into()));
    }
    let bad = |line: &str| Error::InvalidData(format!("malformed rates row: {line}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let converged = f[8].parse::<bool>().map_err(|_| bad(line))?;
            Ok((
                f[0].to_string(),
                f[1].parse().map_err(|_| bad(line))?,
                RatePoint {
                    r: num(f[2])?,
                    seed: f[3].parse().map_err(|_| bad(line))?,
                    error_max: num(f[4])?,
                    error_l2: num(f[5])?,
                    iters: f[6].parse().map_err(|_| bad(line))?,
                    residual: num(f[7])?,
                    converged,
                    admitted: converged,
                },
            ))
        })
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

/// Writes a rate report as `<stem>.csv` or `<stem>.json` in `dir`.
pub fn emit_report(report: &RateReport, format: ReportFormat, dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = match format {
        ReportFormat::Csv => {
            let p = dir.join(format!("{stem}.csv"));
            std::fs::write(&p, rates_csv(report))?;
            p
        }
        ReportFormat::Json => {
            let p = dir.join(format!("{stem}.json"));
            write_json(report, &p)?;
            p
        }
    };
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let f = fit_powerlaw(&[(8.0, 1.0 / 8.0), (16.0, 1.0 / 16.0), (32.0, 1.0 / 32.0)], false).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [8.0f64, 16.0, 32.0, 64.0].iter().map(|&r| (r, r.powi(-2) * r.ln())).collect();
        let g = fit_powerlaw(&pts, true).unwrap();
        assert!((g.slope + 2.0).abs() < 1e-9);
    }

    #[test]
    fn perturbed_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let pts: Vec<(f64, f64)> = [8.0f64, 16.0, 32.0]
                .iter()
                .map(|&r| (r, 7.0 * r.powf(-1.5) * (1.0 + rng.gen_range(-0.05..=0.05))))
                .collect();
            let s = fit_powerlaw(&pts, false).unwrap().slope;
            assert!((-1.65..=-1.35).contains(&s));
        }
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(fit_powerlaw(&[(8.0, 1.0), (16.0, 2.0), (16.0, 1.0)], false), Err(Error::InvalidParameter(_))));
        assert!(matches!(fit_powerlaw(&[(8.0, 1.0), (16.0, 0.0), (32.0, 1.0)], false), Err(Error::InvalidData(_))));
    }

    #[test]
    fn polynomial_calculus() {
        let u = Polynomial::cubic_benchmark(3);
        assert_eq!(u.eval(&[2.0, 3.0, 5.0]), 24.0);
        let ms = Manufactured::new(&u, &[1.0 / 3.0; 3], 1.0).unwrap();
        // f = ā_1 · 6 x1 x2 / 2 = x1 x2.
        assert!((ms.f.eval(&[2.0, 3.0, 0.0]) - 6.0).abs() < 1e-14);
        assert_eq!(ms.third[0].eval(&[0.0, 2.0, 0.0]), 12.0);
        assert_eq!(ms.third[1].eval(&[3.0, 0.0, 0.0]), 18.0);
        assert!(Polynomial::monomial(1.0, vec![5, 0]).validate(2).is_err());
        assert!(Polynomial::monomial(1.0, vec![1, 0]).validate(3).is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let text = r#"{
            "d": 3, "R_list": [8, 12, 16], "seeds_per_R": 4,
            "dist": "uniform-diagonal", "kappa": 0.05,
            "u_bar": {"terms": [{"coeff": 1.0, "powers": [3, 1, 0]}]},
            "solver": {"tol": 1e-9}
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(c.r_list, vec![8.0, 12.0, 16.0]);
        assert_eq!(c.solver.tol, 1e-9);
        assert_eq!(c.torus_l, 16);
        assert_eq!(c.seeds_per_r, 4);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let bad = text.replace("[8, 12, 16]", "[8, 8, 16]");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn affine_rate_experiment_is_exact() {
        let mut c = ExperimentConfig::benchmark(3, vec![4.0, 6.0, 8.0]);
        c.dist = DistributionSpec::constant(vec![1.0, 2.0, 2.0], 0.05);
        c.u_bar = Polynomial { terms: vec![Monomial { coeff: 1.0, powers: vec![1, 0, 0] }, Monomial { coeff: 0.5, powers: vec![0, 0, 1] }] };
        c.seeds_per_r = 1;
        c.solver.tol = 1e-12;
        let pt = rate_point(&c, &Manufactured::new(&c.u_bar, &[0.2, 0.4, 0.4], 1.0).unwrap(), 6.0, 0).unwrap();
        assert!(pt.converged && pt.admitted);
        assert!(pt.error_max <= 10.0 * c.solver.tol);
    }
}
