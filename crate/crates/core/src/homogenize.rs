//! Correctors, flux fields, effective coefficients and higher-order correctors.
//!
//! All corrector computations happen on a torus of side `L`, where the
//! environment is periodic. The corrector equations
//!
//! ```text
//! L_ω v^k = ½ (a_k - ā_k),      L_ω ξ = ψ - ψ̄
//! ```
//!
//! are solvable exactly when `ā_k` and `ψ̄` are the averages against the
//! invariant density `m` of the periodized chain, so those finite-volume
//! averages are used on the right-hand sides.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{reflect, sample_environment, DistributionSpec, EnvironmentField, Geometry, PsiSpec};
use crate::error::{Error, Result};
use crate::harness::fit_powerlaw;
use crate::lattice::{GridDomain, GridFunction};
use crate::operator::{assemble_corrector, assemble_killed, assemble_resolvent};
use crate::solver::{invariant_density, solve_iterative, SolverConfig};

/// Right-hand side of a torus corrector equation.
#[derive(Clone, Debug, PartialEq)]
pub enum CorrectorTarget {
    /// `v^k` with source `½ (a_k - ā_k)`.
    Coefficient(usize),
    /// `ξ` with source `ψ - ψ̄`.
    Psi(PsiSpec),
}

/// One solved corrector together with the average that made it solvable.
#[derive(Clone, Debug)]
pub struct Corrector {
    pub field: GridFunction,
    /// `ā_k` or `ψ̄` for this torus.
    pub bar: f64,
    /// Density-weighted mean of the assembled source before solving.
    pub source_mean: f64,
    /// `‖source‖∞`.
    pub source_scale: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Density-weighted average `Σ m f / Σ m`.
pub fn weighted_average(density: &GridFunction, f: &GridFunction) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (m, v) in density.values().iter().zip(f.values()) {
        num += m * v;
        den += m;
    }
    num / den
}

fn torus_values(env: &EnvironmentField, torus: &Arc<GridDomain>, target: &CorrectorTarget) -> Result<Vec<f64>> {
    let d = torus.dim();
    let a = env.a_table(torus)?;
    Ok(match target {
        CorrectorTarget::Coefficient(k) => {
            if *k >= d {
                return Err(Error::InvalidParameter(format!("coefficient index {k} out of range for d = {d}")));
            }
            a.chunks_exact(d).map(|ai| 0.5 * ai[*k]).collect()
        }
        CorrectorTarget::Psi(psi) => a.chunks_exact(d).map(|ai| psi.of_a(ai)).collect(),
    })
}

/// Solves one corrector equation on `torus`, given the invariant density.
pub fn corrector_torus(
    env: &EnvironmentField,
    torus: &Arc<GridDomain>,
    density: &GridFunction,
    target: &CorrectorTarget,
    config: &SolverConfig,
) -> Result<Corrector> {
    if !torus.is_torus() {
        return Err(Error::InvalidDomain("correctors are computed on a torus".into()));
    }
    if density.values().len() != torus.len() {
        return Err(Error::InvalidData("density lives on a different domain".into()));
    }
    let raw = GridFunction::new(torus.clone(), torus_values(env, torus, target)?)?;
    let half_bar = weighted_average(density, &raw);
    let mut source: Vec<f64> = raw.values().iter().map(|v| v - half_bar).collect();
    // Fold the rounding left in the weighted mean back into the average.
    let tweak = weighted_average(density, &GridFunction::new(torus.clone(), source.clone())?);
    source.iter_mut().for_each(|v| *v -= tweak);
    let source = GridFunction::new(torus.clone(), source)?;
    let source_mean = weighted_average(density, &source);
    let bar = match target {
        CorrectorTarget::Coefficient(_) => 2.0 * (half_bar + tweak),
        CorrectorTarget::Psi(_) => half_bar + tweak,
    };
    let source_scale = source.max_abs();
    if source_scale == 0.0 {
        return Ok(Corrector {
            field: GridFunction::zeros(torus.clone()),
            bar,
            source_mean,
            source_scale,
            residual: 0.0,
            iterations: 0,
        });
    }
    let problem = assemble_corrector(env, torus, &source)?;
    let out = solve_iterative(&problem, config)?;
    if !out.converged {
        return Err(Error::NotConverged { iterations: out.iterations, residual: out.residual_inf });
    }
    Ok(Corrector {
        field: out.solution,
        bar,
        source_mean,
        source_scale,
        residual: out.residual_inf,
        iterations: out.iterations,
    })
}

/// The correctors `v^1..v^d`, `ξ` of one torus, normalised to uniform mean zero.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub domain: Arc<GridDomain>,
    pub density: GridFunction,
    pub v: Vec<Corrector>,
    pub xi: Corrector,
}

impl CorrectorSet {
    pub fn compute(env: &EnvironmentField, torus: &Arc<GridDomain>, psi: &PsiSpec, config: &SolverConfig) -> Result<CorrectorSet> {
        let density = invariant_density(env, torus, config)?;
        let v = (0..torus.dim())
            .map(|k| corrector_torus(env, torus, &density, &CorrectorTarget::Coefficient(k), config))
            .collect::<Result<Vec<_>>>()?;
        let xi = corrector_torus(env, torus, &density, &CorrectorTarget::Psi(psi.clone()), config)?;
        Ok(CorrectorSet { domain: torus.clone(), density, v, xi })
    }

    pub fn a_bar(&self) -> Vec<f64> {
        self.v.iter().map(|c| c.bar).collect()
    }

    pub fn psi_bar(&self) -> f64 {
        self.xi.bar
    }

    /// `ρ = m · L^d`.
    pub fn rho(&self) -> GridFunction {
        let n = self.domain.len() as f64;
        GridFunction::new(self.domain.clone(), self.density.values().iter().map(|m| m * n).collect()).expect("same domain")
    }
}

/// `λ^k_j` (indexed `[k][j]`) and `η_j`.
#[derive(Clone, Debug)]
pub struct FluxFields {
    pub lambda: Vec<Vec<GridFunction>>,
    pub eta: Vec<GridFunction>,
}

/// `a_j(x) [u(x + e_j) - u(x - e_j)]` on a torus.
pub fn centered_flux(env: &EnvironmentField, u: &GridFunction, j: usize) -> Result<GridFunction> {
    let domain = u.domain();
    if !domain.is_torus() {
        return Err(Error::InvalidDomain("flux fields are computed on a torus".into()));
    }
    if env.dim() != domain.dim() {
        return Err(Error::DimensionMismatch { expected: domain.dim(), actual: env.dim() });
    }
    let d = domain.dim();
    let a = env.a_table(domain)?;
    let vals = u.values();
    let out = (0..domain.len())
        .map(|i| {
            let plus = domain.neighbor(i, 2 * j).expect("torus");
            let minus = domain.neighbor(i, 2 * j + 1).expect("torus");
            a[i * d + j] * (vals[plus] - vals[minus])
        })
        .collect();
    GridFunction::new(domain.clone(), out)
}

pub fn flux_fields(env: &EnvironmentField, set: &CorrectorSet) -> Result<FluxFields> {
    let d = set.domain.dim();
    let lambda = set
        .v
        .iter()
        .map(|vk| (0..d).map(|j| centered_flux(env, &vk.field, j)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let eta = (0..d).map(|j| centered_flux(env, &set.xi.field, j)).collect::<Result<Vec<_>>>()?;
    Ok(FluxFields { lambda, eta })
}

/// Everything computed for one environment on one torus.
#[derive(Clone, Debug)]
pub struct TorusAnalysis {
    pub correctors: CorrectorSet,
    pub flux: FluxFields,
}

impl TorusAnalysis {
    pub fn compute(env: &EnvironmentField, torus: &Arc<GridDomain>, psi: &PsiSpec, config: &SolverConfig) -> Result<TorusAnalysis> {
        let correctors = CorrectorSet::compute(env, torus, psi, config)?;
        let flux = flux_fields(env, &correctors)?;
        Ok(TorusAnalysis { correctors, flux })
    }

    pub fn lambda_bar(&self) -> Vec<Vec<f64>> {
        let m = &self.correctors.density;
        self.flux.lambda.iter().map(|row| row.iter().map(|f| weighted_average(m, f)).collect()).collect()
    }

    pub fn eta_bar(&self) -> Vec<f64> {
        self.flux.eta.iter().map(|f| weighted_average(&self.correctors.density, f)).collect()
    }

    pub fn sample(&self, seed: u64) -> TorusSample {
        let rho = self.correctors.rho();
        let r = rho.values();
        TorusSample {
            seed,
            a_bar: self.correctors.a_bar(),
            psi_bar: self.correctors.psi_bar(),
            lambda_bar: self.lambda_bar(),
            eta_bar: self.eta_bar(),
            rho_min: r.iter().cloned().fold(f64::INFINITY, f64::min),
            rho_max: r.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            rho_mean: rho.mean(),
        }
    }
}

/// Per-seed torus averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusSample {
    pub seed: u64,
    pub a_bar: Vec<f64>,
    pub psi_bar: f64,
    pub lambda_bar: Vec<Vec<f64>>,
    pub eta_bar: Vec<f64>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_mean: f64,
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Estimate { mean, std_err: f64::NAN };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Estimate { mean, std_err: (var / n).sqrt() }
    }

    /// `mean / std_err`; zero when both vanish.
    pub fn z_score(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.mean / self.std_err
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveStats {
    pub d: usize,
    pub torus_l: i64,
    pub a_bar: Vec<Estimate>,
    pub psi_bar: Estimate,
    pub lambda_bar: Vec<Vec<Estimate>>,
    pub eta_bar: Vec<Estimate>,
    pub rho_summary: RhoSummary,
    pub sample_count: usize,
    pub failures: Vec<SeedFailure>,
    pub samples: Vec<TorusSample>,
}

impl EffectiveStats {
    pub fn from_samples(d: usize, torus_l: i64, samples: Vec<TorusSample>, failures: Vec<SeedFailure>) -> Result<EffectiveStats> {
        if samples.is_empty() {
            return Err(Error::Experiment(format!("every seed failed: {failures:?}")));
        }
        let est = |f: &dyn Fn(&TorusSample) -> f64| Estimate::from_samples(&samples.iter().map(f).collect::<Vec<_>>());
        let a_bar = (0..d).map(|i| est(&|s| s.a_bar[i])).collect();
        let lambda_bar = (0..d).map(|k| (0..d).map(|j| est(&|s| s.lambda_bar[k][j])).collect()).collect();
        let eta_bar = (0..d).map(|j| est(&|s| s.eta_bar[j])).collect();
        let rho_summary = RhoSummary {
            min: samples.iter().map(|s| s.rho_min).fold(f64::INFINITY, f64::min),
            max: samples.iter().map(|s| s.rho_max).fold(f64::NEG_INFINITY, f64::max),
            mean: samples.iter().map(|s| s.rho_mean).sum::<f64>() / samples.len() as f64,
        };
        Ok(EffectiveStats {
            d,
            torus_l,
            a_bar,
            psi_bar: est(&|s| s.psi_bar),
            lambda_bar,
            eta_bar,
            rho_summary,
            sample_count: samples.len(),
            failures,
            samples,
        })
    }
}

/// Runs the torus pipeline for one seed.
pub fn torus_sample(
    spec: &DistributionSpec,
    psi: &PsiSpec,
    dim: usize,
    torus_l: i64,
    seed: u64,
    config: &SolverConfig,
) -> Result<TorusSample> {
    let env = sample_environment(spec, dim, seed, Geometry::Torus(torus_l))?;
    let torus = GridDomain::torus(torus_l, dim)?;
    Ok(TorusAnalysis::compute(&env, &torus, psi, config)?.sample(seed))
}

/// Ensemble of torus averages over `seeds`; failed seeds are recorded, not fatal.
pub fn effective_stats(
    spec: &DistributionSpec,
    psi: &PsiSpec,
    dim: usize,
    torus_l: i64,
    seeds: &[u64],
    config: &SolverConfig,
) -> Result<EffectiveStats> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one seed is required".into()));
    }
    spec.validate(dim)?;
    let results: Vec<_> = seeds.par_iter().map(|&s| (s, torus_sample(spec, psi, dim, torus_l, s, config))).collect();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => failures.push(SeedFailure { seed, error: e.to_string() }),
        }
    }
    EffectiveStats::from_samples(dim, torus_l, samples, failures)
}

/// The flux averages of an environment and of its reflection.
///
/// Since the reflected correctors are the reflected fields, each reflected
/// flux is minus the reflected original, so the two averages cancel up to
/// solver error. `bound` is `2 · tol · L² · ‖source‖∞`, the largest
/// discrepancy the solver tolerance permits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingCheck {
    pub seed: u64,
    pub eta_bar: Vec<f64>,
    pub eta_bar_reflected: Vec<f64>,
    pub eta_bound: f64,
    pub lambda_bar: Vec<Vec<f64>>,
    pub lambda_bar_reflected: Vec<Vec<f64>>,
    pub lambda_bound: f64,
}

impl PairingCheck {
    pub fn from_analyses(seed: u64, tol: f64, original: &TorusAnalysis, reflected: &TorusAnalysis) -> PairingCheck {
        let l2 = (original.correctors.domain.torus_side().unwrap_or(1) as f64).powi(2);
        let xi_scale = original.correctors.xi.source_scale.max(reflected.correctors.xi.source_scale);
        let v_scale = original
            .correctors
            .v
            .iter()
            .chain(&reflected.correctors.v)
            .map(|c| c.source_scale)
            .fold(0.0, f64::max);
        PairingCheck {
            seed,
            eta_bar: original.eta_bar(),
            eta_bar_reflected: reflected.eta_bar(),
            eta_bound: 2.0 * tol * l2 * xi_scale,
            lambda_bar: original.lambda_bar(),
            lambda_bar_reflected: reflected.lambda_bar(),
            lambda_bound: 2.0 * tol * l2 * v_scale,
        }
    }

    pub fn eta_sums(&self) -> Vec<f64> {
        self.eta_bar.iter().zip(&self.eta_bar_reflected).map(|(a, b)| a + b).collect()
    }

    pub fn lambda_sums(&self) -> Vec<f64> {
        self.lambda_bar
            .iter()
            .zip(&self.lambda_bar_reflected)
            .flat_map(|(r, s)| r.iter().zip(s).map(|(a, b)| a + b))
            .collect()
    }

    pub fn holds(&self) -> bool {
        self.eta_sums().iter().all(|s| s.abs() <= self.eta_bound)
            && self.lambda_sums().iter().all(|s| s.abs() <= self.lambda_bound)
    }
}

/// Runs the pipeline on `env` and on `reflect(env)`.
pub fn reflection_pairing(
    env: &EnvironmentField,
    torus: &Arc<GridDomain>,
    psi: &PsiSpec,
    config: &SolverConfig,
) -> Result<(TorusAnalysis, TorusAnalysis, PairingCheck)> {
    let original = TorusAnalysis::compute(env, torus, psi, config)?;
    let reflected = TorusAnalysis::compute(&reflect(env), torus, psi, config)?;
    let check = PairingCheck::from_analyses(env.seed(), config.tol, &original, &reflected);
    Ok((original, reflected, check))
}

/// Which realisation of the higher-order corrector to compute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HigherKind {
    /// `L_ω p = η_R p / R² + (λ - λ̄)` on a box of half-width `⌈truncation · R⌉`, zero outside.
    Local { truncation: f64 },
    /// `(1/R² - L_ω) p = -(λ - λ̄)` on the torus of the flux field.
    Stationary,
}

impl HigherKind {
    pub fn local() -> HigherKind {
        HigherKind::Local { truncation: crate::operator::DEFAULT_TRUNCATION }
    }
}

/// Higher-order corrector driven by one flux component (`λ^k_j` gives
/// `p^k_j`, `η_j` gives `s_j`), given on a torus and extended periodically.
///
/// For the local kind `env` must be periodic with the torus period so that
/// the extended flux belongs to the same environment.
pub fn higher_corrector(
    env: &EnvironmentField,
    r: f64,
    flux: &GridFunction,
    bar: f64,
    kind: HigherKind,
    config: &SolverConfig,
) -> Result<GridFunction> {
    if r < 2.0 {
        return Err(Error::InvalidParameter(format!("R = {r} must be at least 2")));
    }
    let torus = flux.domain();
    let side = torus
        .torus_side()
        .ok_or_else(|| Error::InvalidDomain("flux fields live on a torus".into()))?;
    let centered: Vec<f64> = flux.values().iter().map(|v| v - bar).collect();
    let (problem, zero) = match kind {
        HigherKind::Stationary => {
            // (m - L) p = -(λ - λ̄), matching the killed problem's sign.
            let rhs = GridFunction::new(torus.clone(), centered.iter().map(|v| -v).collect())?;
            (assemble_resolvent(env, torus, 1.0 / (r * r), &rhs)?, rhs.max_abs() == 0.0)
        }
        HigherKind::Local { truncation } => {
            if env.geometry() != Geometry::Torus(side) {
                return Err(Error::InvalidParameter("local correctors need the environment periodic with the flux torus".into()));
            }
            let half = (truncation * r).ceil() as i64;
            let domain = GridDomain::cube(half, torus.dim())?;
            let rhs = GridFunction::from_fn(domain.clone(), |c| centered[torus.index_of(c).expect("torus wraps")]);
            let zero = rhs.max_abs() == 0.0;
            (assemble_killed(env, r, &domain, &rhs, truncation)?, zero)
        }
    };
    if zero {
        return Ok(GridFunction::zeros(problem.domain().clone()));
    }
    let out = solve_iterative(&problem, config)?;
    if !out.converged {
        return Err(Error::NotConverged { iterations: out.iterations, residual: out.residual_inf });
    }
    Ok(out.solution)
}

/// Reference growth functions for correctors and higher-order correctors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthReference {
    /// Corrector size `μ(R)`.
    Mu,
    /// Size of `p`, `Γ(R)`.
    Gamma,
    /// Size of `∇p`, `Γ̃(R)`.
    GammaTilde,
    /// `δ(R)`.
    Delta,
}

impl GrowthReference {
    pub fn value(self, dim: usize, r: f64) -> Result<f64> {
        let log = r.ln();
        let v = match (self, dim) {
            (_, 0 | 1) => return Err(Error::InvalidParameter(format!("no growth reference in d = {dim}"))),
            (GrowthReference::Mu, 2) => r,
            (GrowthReference::Mu, 3) => r.sqrt(),
            (GrowthReference::Mu, 4) => log.max(1.0).sqrt(),
            (GrowthReference::Mu, _) => 1.0,
            (GrowthReference::Delta, 2) => r.max(2.0).ln().powf(1.5),
            (GrowthReference::Delta, _) => 1.0,
            (GrowthReference::Gamma, 2) | (GrowthReference::GammaTilde, 2) => {
                return Err(Error::InvalidParameter(format!("{self:?} is not defined in d = 2")))
            }
            (GrowthReference::Gamma, 3) => r.powf(1.5),
            (GrowthReference::Gamma, 4) => r * log.sqrt(),
            (GrowthReference::Gamma, _) => r,
            (GrowthReference::GammaTilde, 3) => r.sqrt(),
            (GrowthReference::GammaTilde, _) => log,
        };
        Ok(v)
    }

    /// Power of `R` in the reference, ignoring logarithms.
    pub fn exponent(self, dim: usize) -> Result<f64> {
        self.value(dim, 2.0)?;
        Ok(match (self, dim) {
            (GrowthReference::Mu, 2) => 1.0,
            (GrowthReference::Mu, 3) => 0.5,
            (GrowthReference::Gamma, 3) => 1.5,
            (GrowthReference::Gamma, _) => 1.0,
            (GrowthReference::GammaTilde, 3) => 0.5,
            _ => 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthProfile {
    pub radii: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub fitted_slope: f64,
    pub reference: GrowthReference,
    pub reference_exponent: f64,
}

/// Maximum of `|field|` over sites with `|x| < r` (torus distances are minimal-image).
pub fn ball_max(field: &GridFunction, r: f64) -> f64 {
    let dom = field.domain();
    (0..dom.len())
        .filter(|&i| dom.centered_norm(i) < r)
        .fold(0.0, |m, i| m.max(field.values()[i].abs()))
}

/// Measures `max_{B_r} |field_r|` for each radius and fits a power law.
pub fn growth_profile(
    factory: impl Fn(f64) -> Result<GridFunction>,
    radii: &[f64],
    reference: GrowthReference,
    dim: usize,
) -> Result<GrowthProfile> {
    let amplitudes = radii.iter().map(|&r| factory(r).map(|f| ball_max(&f, r))).collect::<Result<Vec<_>>>()?;
    growth_from_amplitudes(radii, amplitudes, reference, dim)
}

pub fn growth_from_amplitudes(radii: &[f64], amplitudes: Vec<f64>, reference: GrowthReference, dim: usize) -> Result<GrowthProfile> {
    if radii.len() < 3 {
        return Err(Error::InvalidParameter("a growth profile needs at least 3 radii".into()));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("radii must be increasing".into()));
    }
    let points: Vec<(f64, f64)> = radii.iter().cloned().zip(amplitudes.iter().cloned()).collect();
    let fit = fit_powerlaw(&points, false)?;
    Ok(GrowthProfile {
        radii: radii.to_vec(),
        amplitudes,
        fitted_slope: fit.slope,
        reference,
        reference_exponent: reference.exponent(dim)?,
    })
}
