//! The operator `L_ω u(x) = ½ Σ_i a_i(x) ∇_i² u(x)` and assembly of the
//! nearest-neighbour linear systems built from it.
//!
//! Every assembled system has the form `A u = b` over the evaluation sites
//! (interior sites, or all sites of a torus), where a row of `A` carries a
//! centre weight and `2d` neighbour weights. For the forward operator the
//! neighbour weights are `ω(x, x ± e_i) = a_i(x) / 2` and the centre weight is
//! `-1 - mass(x)`, so `A = L_ω - mass`.

use std::io::Write;
use std::sync::Arc;

use crate::environment::EnvironmentField;
use crate::error::{Error, Result};
use crate::lattice::{DomainKind, GridDomain, GridFunction, Site};

/// Flag marking a neighbour that is a known (boundary) site rather than an unknown.
const KNOWN: u32 = 1 << 31;

/// Extra condition that pins down the kernel of a singular system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    None,
    /// Kernel spanned by constants; the solution is normalised to mean zero.
    ZeroMean,
    /// Homogeneous balance system; the solution is normalised to total mass one.
    UnitSum,
}

/// A nearest-neighbour linear system on a [`GridDomain`].
#[derive(Clone, Debug)]
pub struct LinearProblem {
    domain: Arc<GridDomain>,
    dirs: usize,
    unknowns: Vec<u32>,
    unknown_of_site: Vec<u32>,
    center: Vec<f64>,
    neighbors: Vec<u32>,
    weights: Vec<f64>,
    rhs: Vec<f64>,
    boundary: Vec<f64>,
    mass: Vec<f64>,
    delta_source: Option<(usize, f64)>,
    gauge: Gauge,
}

impl LinearProblem {
    /// Forward stencil `L_ω - mass` on the evaluation sites of `domain`.
    fn forward(env: &EnvironmentField, domain: &Arc<GridDomain>, mass: Vec<f64>) -> Result<LinearProblem> {
        let a = env.a_table(domain)?;
        let mut p = Self::skeleton(domain, mass);
        let (d, dirs) = (domain.dim(), p.dirs);
        for (r, &s) in p.unknowns.iter().enumerate() {
            let s = s as usize;
            for dir in 0..dirs {
                p.weights[r * dirs + dir] = a[s * d + dir / 2] / 2.0;
            }
        }
        Ok(p)
    }

    /// Transposed stencil `(L_ω - mass)^T`; only meaningful on a torus.
    fn transposed(env: &EnvironmentField, domain: &Arc<GridDomain>, mass: Vec<f64>) -> Result<LinearProblem> {
        let a = env.a_table(domain)?;
        let mut p = Self::skeleton(domain, mass);
        let (d, dirs) = (domain.dim(), p.dirs);
        for (r, &s) in p.unknowns.iter().enumerate() {
            for dir in 0..dirs {
                // Row y, column y + e: ω(y + e, y) = a_i(y + e) / 2.
                let t = domain.neighbor(s as usize, dir).expect("torus neighbour");
                p.weights[r * dirs + dir] = a[t * d + dir / 2] / 2.0;
            }
        }
        Ok(p)
    }

    fn skeleton(domain: &Arc<GridDomain>, mass: Vec<f64>) -> LinearProblem {
        let dirs = 2 * domain.dim();
        let unknowns: Vec<u32> = domain.interior_indices().map(|i| i as u32).collect();
        let mut unknown_of_site = vec![u32::MAX; domain.len()];
        for (r, &s) in unknowns.iter().enumerate() {
            unknown_of_site[s as usize] = r as u32;
        }
        let mut neighbors = vec![0u32; unknowns.len() * dirs];
        for (r, &s) in unknowns.iter().enumerate() {
            for dir in 0..dirs {
                let t = domain.neighbor(s as usize, dir).expect("interior sites have all neighbours");
                neighbors[r * dirs + dir] =
                    if unknown_of_site[t] == u32::MAX { KNOWN | t as u32 } else { unknown_of_site[t] };
            }
        }
        let n = unknowns.len();
        let center = mass.iter().map(|m| -1.0 - m).collect();
        LinearProblem {
            domain: domain.clone(),
            dirs,
            unknowns,
            unknown_of_site,
            center,
            neighbors,
            weights: vec![0.0; n * dirs],
            rhs: vec![0.0; n],
            boundary: vec![0.0; domain.len()],
            mass,
            delta_source: None,
            gauge: Gauge::None,
        }
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn unknown_count(&self) -> usize {
        self.unknowns.len()
    }

    /// Site index of unknown `r`.
    pub fn site_of(&self, r: usize) -> usize {
        self.unknowns[r] as usize
    }

    pub fn unknown_of(&self, site: usize) -> Option<usize> {
        let r = self.unknown_of_site[site];
        (r != u32::MAX).then_some(r as usize)
    }

    pub fn gauge(&self) -> Gauge {
        self.gauge
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn boundary_values(&self) -> &[f64] {
        &self.boundary
    }

    pub fn delta_source(&self) -> Option<(usize, f64)> {
        self.delta_source
    }

    pub fn center(&self, r: usize) -> f64 {
        self.center[r]
    }

    /// Neighbour entries of row `r`: `(Ok(unknown) | Err(boundary site), weight)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (std::result::Result<usize, usize>, f64)> + '_ {
        let base = r * self.dirs;
        (0..self.dirs).map(move |k| {
            let c = self.neighbors[base + k];
            let target = if c & KNOWN != 0 { Err((c & !KNOWN) as usize) } else { Ok(c as usize) };
            (target, self.weights[base + k])
        })
    }

    /// `b` with boundary data and the point source folded in.
    pub fn effective_rhs(&self) -> Vec<f64> {
        let mut b = self.rhs.clone();
        for (r, br) in b.iter_mut().enumerate() {
            for (target, w) in self.row(r) {
                if let Err(site) = target {
                    *br -= w * self.boundary[site];
                }
            }
        }
        if let Some((r, w)) = self.delta_source {
            b[r] += w;
        }
        b
    }

    /// `y = A x` over the unknowns.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let dirs = self.dirs;
        for (r, yr) in y.iter_mut().enumerate() {
            let base = r * dirs;
            let mut acc = self.center[r] * x[r];
            for k in 0..dirs {
                let c = self.neighbors[base + k];
                if c & KNOWN == 0 {
                    acc += self.weights[base + k] * x[c as usize];
                }
            }
            *yr = acc;
        }
    }

    /// `‖rhs‖∞ + |delta| + ‖boundary‖∞`, floored at the smallest normal float.
    pub fn residual_scale(&self) -> f64 {
        let rhs = self.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bnd = self.boundary.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let delta = self.delta_source.map(|(_, w)| w.abs()).unwrap_or(0.0);
        (rhs + delta + bnd).max(f64::MIN_POSITIVE)
    }

    /// `max |x|²` over the domain for a massless problem on a bounded domain,
    /// else `None`. Since `L_ω(c - |x|²) = -1`, a residual `r` moves the
    /// solution by at most this factor times `‖r‖∞`.
    pub fn error_amplification(&self) -> Option<f64> {
        if self.domain.boundary_count() == 0 || self.mass.iter().any(|&m| m != 0.0) {
            return None;
        }
        let max = (0..self.domain.len())
            .map(|i| self.domain.coords(i).iter().map(|&c| (c * c) as f64).sum::<f64>())
            .fold(0.0f64, f64::max);
        Some(max.max(1.0))
    }

    /// True when `A` is singular without a gauge: a torus system with no mass.
    pub fn is_structurally_singular(&self) -> bool {
        self.domain.boundary_count() == 0 && self.gauge == Gauge::None && self.mass.iter().all(|&m| m == 0.0)
    }

    /// Scatters unknown values into a grid function carrying the boundary data.
    pub fn to_grid(&self, x: &[f64]) -> GridFunction {
        let mut values = self.boundary.clone();
        for (r, &s) in self.unknowns.iter().enumerate() {
            values[s as usize] = x[r];
        }
        GridFunction::new(self.domain.clone(), values).expect("sizes match")
    }

    /// Unknown values gathered from a grid function on the same domain.
    pub fn gather(&self, u: &GridFunction) -> Vec<f64> {
        self.unknowns.iter().map(|&s| u.values()[s as usize]).collect()
    }

    /// Coordinate-list dump `row col value`, one entry per line, unknown indices.
    pub fn write_coo(&self, out: &mut impl Write) -> std::io::Result<()> {
        for r in 0..self.unknown_count() {
            writeln!(out, "{r} {r} {:e}", self.center[r])?;
            for (target, w) in self.row(r) {
                if let Ok(c) = target {
                    writeln!(out, "{r} {c} {w:e}")?;
                }
            }
        }
        Ok(())
    }
}

fn check_dims(env: &EnvironmentField, domain: &GridDomain) -> Result<()> {
    if env.dim() != domain.dim() {
        return Err(Error::DimensionMismatch { expected: domain.dim(), actual: env.dim() });
    }
    Ok(())
}

fn check_same_domain(domain: &Arc<GridDomain>, u: &GridFunction) -> Result<()> {
    if !Arc::ptr_eq(domain, u.domain()) && u.values().len() != domain.len() {
        return Err(Error::InvalidData("field lives on a different domain".into()));
    }
    Ok(())
}

fn require_torus(domain: &GridDomain) -> Result<()> {
    if !domain.is_torus() {
        return Err(Error::InvalidDomain(format!("expected a torus, got {:?}", domain.kind())));
    }
    Ok(())
}

/// `L_ω u` at every evaluation site; boundary sites of the result hold 0.
pub fn apply_l(env: &EnvironmentField, u: &GridFunction) -> Result<GridFunction> {
    let domain = u.domain();
    check_dims(env, domain)?;
    let d = domain.dim();
    let a = env.a_table(domain)?;
    let vals = u.values();
    let mut out = vec![0.0; domain.len()];
    for i in domain.interior_indices() {
        let c = vals[i];
        let mut acc = 0.0;
        for axis in 0..d {
            let plus = domain.neighbor(i, 2 * axis).ok_or_else(|| Error::OutOfDomain(domain.site(i).step(2 * axis).coords().to_vec()))?;
            let minus = domain
                .neighbor(i, 2 * axis + 1)
                .ok_or_else(|| Error::OutOfDomain(domain.site(i).step(2 * axis + 1).coords().to_vec()))?;
            acc += a[i * d + axis] * (vals[plus] + vals[minus] - 2.0 * c);
        }
        out[i] = 0.5 * acc;
    }
    GridFunction::new(domain.clone(), out)
}

/// `L_ω u = f_scaled` on the interior, `u = g` on the boundary of a ball (or box).
pub fn assemble_dirichlet(
    env: &EnvironmentField,
    domain: &Arc<GridDomain>,
    f_scaled: &GridFunction,
    g: &GridFunction,
) -> Result<LinearProblem> {
    check_dims(env, domain)?;
    if domain.is_torus() {
        return Err(Error::InvalidDomain("Dirichlet problems need a ball or box".into()));
    }
    check_same_domain(domain, f_scaled)?;
    check_same_domain(domain, g)?;
    let mut p = LinearProblem::forward(env, domain, vec![0.0; domain.interior_count()])?;
    p.rhs = p.gather(f_scaled);
    for i in domain.boundary_indices() {
        p.boundary[i] = g.values()[i];
    }
    Ok(p)
}

/// `(m - L_ω) u = rhs` on a torus.
pub fn assemble_resolvent(env: &EnvironmentField, torus: &Arc<GridDomain>, mass: f64, rhs: &GridFunction) -> Result<LinearProblem> {
    check_dims(env, torus)?;
    require_torus(torus)?;
    check_mass(mass)?;
    check_same_domain(torus, rhs)?;
    let mut p = LinearProblem::forward(env, torus, vec![mass; torus.len()])?;
    p.rhs = rhs.values().iter().map(|v| -v).collect();
    Ok(p)
}

/// `(m - L_ω)^T u = rhs` on a torus; with `rhs = 1_x` the solution is the row
/// `G^AP(x, ·)` of the resolvent Green kernel.
pub fn assemble_resolvent_adjoint(
    env: &EnvironmentField,
    torus: &Arc<GridDomain>,
    mass: f64,
    rhs: &GridFunction,
) -> Result<LinearProblem> {
    check_dims(env, torus)?;
    require_torus(torus)?;
    check_mass(mass)?;
    check_same_domain(torus, rhs)?;
    let mut p = LinearProblem::transposed(env, torus, vec![mass; torus.len()])?;
    p.rhs = rhs.values().iter().map(|v| -v).collect();
    Ok(p)
}

fn check_mass(mass: f64) -> Result<()> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::SingularSystem(format!("resolvent mass {mass} must be positive")));
    }
    Ok(())
}

/// Radial cutoff `η_R(x) = η_0(x / R)`: zero on `|x| <= 7R/3`, one on
/// `|x| >= 8R/3`, quintic smoothstep in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    pub radius: f64,
}

impl Cutoff {
    pub fn eta(&self, x: &[i64]) -> f64 {
        let t = (crate::lattice::norm(x) / self.radius - 7.0 / 3.0) * 3.0;
        let s = t.clamp(0.0, 1.0);
        (s * s * s * (10.0 + s * (-15.0 + 6.0 * s))).clamp(0.0, 1.0)
    }
}

/// How far out the killed problems are solved, in units of `R`.
pub const DEFAULT_TRUNCATION: f64 = 4.0;

/// `(L_ω - η_R / R²) u = rhs` on a box, zero on the box boundary.
///
/// The box half-width must be at least `truncation · R` with `truncation > 8/3`.
pub fn assemble_killed(
    env: &EnvironmentField,
    r: f64,
    domain: &Arc<GridDomain>,
    rhs: &GridFunction,
    truncation: f64,
) -> Result<LinearProblem> {
    check_dims(env, domain)?;
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("cutoff radius {r} must be positive")));
    }
    if !(truncation > 8.0 / 3.0) {
        return Err(Error::InvalidParameter(format!("truncation {truncation} must exceed 8/3")));
    }
    let DomainKind::Box { half_width } = domain.kind() else {
        return Err(Error::InvalidDomain("killed problems are solved on a box".into()));
    };
    let needed = (truncation * r).ceil() as i64;
    if half_width < needed {
        return Err(Error::DomainCoverage(format!("box half-width {half_width} does not cover radius {needed}")));
    }
    check_same_domain(domain, rhs)?;
    let cutoff = Cutoff { radius: r };
    let r2 = r * r;
    let mass = domain.interior_indices().map(|i| cutoff.eta(domain.coords(i)) / r2).collect();
    let mut p = LinearProblem::forward(env, domain, mass)?;
    p.rhs = p.gather(rhs);
    Ok(p)
}

/// The local Green function system `L_ω G = η_R G / R² - 1_z` with zero outer boundary.
pub fn assemble_green_local(
    env: &EnvironmentField,
    r: f64,
    z: &Site,
    domain: &Arc<GridDomain>,
    truncation: f64,
) -> Result<LinearProblem> {
    if z.norm() >= r {
        return Err(Error::InvalidParameter(format!("pole {z:?} outside B_R")));
    }
    let mut p = assemble_killed(env, r, domain, &GridFunction::zeros(domain.clone()), truncation)?;
    let site = domain.index(z).ok_or_else(|| Error::OutOfDomain(z.coords().to_vec()))?;
    let row = p.unknown_of(site).ok_or_else(|| Error::OutOfDomain(z.coords().to_vec()))?;
    p.delta_source = Some((row, -1.0));
    Ok(p)
}

/// `L_ω v = rhs` on a torus, solution normalised to mean zero.
pub fn assemble_corrector(env: &EnvironmentField, torus: &Arc<GridDomain>, rhs: &GridFunction) -> Result<LinearProblem> {
    check_dims(env, torus)?;
    require_torus(torus)?;
    check_same_domain(torus, rhs)?;
    let mut p = LinearProblem::forward(env, torus, vec![0.0; torus.len()])?;
    p.rhs = rhs.values().to_vec();
    p.gauge = Gauge::ZeroMean;
    Ok(p)
}

/// Balance equations `Σ_x m(x) ω(x, y) = m(y)` with `Σ m = 1`.
pub fn assemble_adjoint(env: &EnvironmentField, torus: &Arc<GridDomain>) -> Result<LinearProblem> {
    check_dims(env, torus)?;
    require_torus(torus)?;
    let mut p = LinearProblem::transposed(env, torus, vec![0.0; torus.len()])?;
    p.gauge = Gauge::UnitSum;
    Ok(p)
}
