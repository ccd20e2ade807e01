//! Random environments: i.i.d. diagonal coefficient fields `ω`, their
//! normalisation `a = ω / tr ω`, the jump kernel `ω(x, x ± e_i) = a_i(x) / 2`,
//! spatial shifts and reflection, and the local source functional `ψ`.
//!
//! Site values come from a keyed ChaCha stream: the stream number is the
//! packed canonical coordinate of the site, so a value depends only on
//! `(seed, law, coordinate)` and never on traversal order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{GridDomain, Site};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistName {
    /// Each `ω_i` uniform on `[α, 1]`.
    UniformDiagonal,
    /// Each `ω_i` equal to `α` or `1` with probability 1/2.
    TwoPoint,
    /// Deterministic `ω ≡ diag`.
    Constant,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag: Option<Vec<f64>>,
}

/// Single-site law of `ω` together with the ellipticity constant `κ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub dist: DistName,
    pub kappa: f64,
    #[serde(default)]
    pub params: DistParams,
}

impl DistributionSpec {
    pub fn uniform(kappa: f64) -> Self {
        DistributionSpec { dist: DistName::UniformDiagonal, kappa, params: DistParams::default() }
    }

    pub fn two_point(kappa: f64) -> Self {
        DistributionSpec { dist: DistName::TwoPoint, kappa, params: DistParams::default() }
    }

    pub fn constant(diag: Vec<f64>, kappa: f64) -> Self {
        DistributionSpec { dist: DistName::Constant, kappa, params: DistParams { alpha: None, diag: Some(diag) } }
    }

    /// Lower end `α` used by the random laws. Defaults to the smallest value
    /// for which `α / (α + d - 1) >= 2κ`, nudged up by a relative 1e-12 so
    /// the bound survives rounding.
    pub fn alpha(&self, dim: usize) -> f64 {
        self.params.alpha.unwrap_or_else(|| {
            let k2 = 2.0 * self.kappa;
            (k2 * (dim as f64 - 1.0) / (1.0 - k2) * (1.0 + 1e-12)).min(1.0)
        })
    }

    /// True when the law is invariant under permutations of the axes, in which
    /// case the homogenized matrix is exactly `I / d`.
    pub fn is_exchangeable(&self) -> bool {
        match self.dist {
            DistName::UniformDiagonal | DistName::TwoPoint => true,
            DistName::Constant => self
                .params
                .diag
                .as_ref()
                .map(|d| d.iter().all(|&x| x == d[0]))
                .unwrap_or(false),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<Law> {
        let max_kappa = 1.0 / (2.0 * dim as f64);
        if !(self.kappa > 0.0 && self.kappa <= max_kappa) {
            return Err(Error::EllipticityViolation(format!("kappa {} outside (0, {max_kappa}]", self.kappa)));
        }
        let k2 = 2.0 * self.kappa;
        match self.dist {
            DistName::UniformDiagonal | DistName::TwoPoint => {
                let alpha = self.alpha(dim);
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1]")));
                }
                let worst = alpha / (alpha + (dim as f64 - 1.0));
                if worst < k2 {
                    return Err(Error::EllipticityViolation(format!(
                        "alpha {alpha} allows a_i = {worst} < 2 kappa = {k2}"
                    )));
                }
                Ok(if self.dist == DistName::UniformDiagonal { Law::Uniform { alpha } } else { Law::TwoPoint { alpha } })
            }
            DistName::Constant => {
                let diag = self
                    .params
                    .diag
                    .clone()
                    .ok_or_else(|| Error::InvalidParameter("constant law needs params.diag".into()))?;
                if diag.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, actual: diag.len() });
                }
                if diag.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                    return Err(Error::InvalidParameter("constant diag entries must be positive".into()));
                }
                let tr: f64 = diag.iter().sum();
                if diag.iter().any(|&w| w / tr < k2) {
                    return Err(Error::EllipticityViolation(format!("diag {diag:?} violates 2 kappa = {k2}")));
                }
                Ok(Law::Constant { diag })
            }
        }
    }
}

/// Validated single-site law.
#[derive(Clone, Debug, PartialEq)]
pub enum Law {
    Uniform { alpha: f64 },
    TwoPoint { alpha: f64 },
    Constant { diag: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// Independent values at every site of `Z^d`.
    InfiniteWindow,
    /// Values repeat with period `L` along every axis.
    Torus(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Identity,
    Reflected,
}

/// A reproducible random environment on `Z^d`.
///
/// A view coordinate `x` maps to the base coordinate `s x + t` with
/// `s = ±1` (orientation) and `t` a translation; shifts and reflections only
/// change `(s, t)`.
#[derive(Clone, Debug)]
pub struct EnvironmentField {
    spec: DistributionSpec,
    law: Law,
    dim: usize,
    seed: u64,
    geometry: Geometry,
    orientation: Orientation,
    translation: Vec<i64>,
    base: ChaCha8Rng,
    bits: u32,
}

impl EnvironmentField {
    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn law(&self) -> &Law {
        &self.law
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.law, Law::Constant { .. })
    }

    fn sign(&self) -> i64 {
        match self.orientation {
            Orientation::Identity => 1,
            Orientation::Reflected => -1,
        }
    }

    /// Base coordinate reduced to its canonical representative.
    fn canonical(&self, x: &[i64]) -> Vec<i64> {
        let s = self.sign();
        x.iter()
            .zip(&self.translation)
            .map(|(&xi, &ti)| {
                let y = s * xi + ti;
                match self.geometry {
                    Geometry::Torus(l) => y.rem_euclid(l),
                    Geometry::InfiniteWindow => y,
                }
            })
            .collect()
    }

    fn key(&self, c: &[i64]) -> u64 {
        let half = 1i64 << (self.bits - 1);
        let mut key = 0u64;
        for (i, &x) in c.iter().enumerate() {
            let shifted = x + half;
            assert!(
                (0..2 * half).contains(&shifted),
                "coordinate {x} outside the representable window of ±{half}"
            );
            key |= (shifted as u64) << (self.bits as usize * i);
        }
        key
    }

    fn omega_canonical(&self, c: &[i64], out: &mut [f64]) {
        match &self.law {
            Law::Constant { diag } => out.copy_from_slice(diag),
            Law::Uniform { alpha } => {
                let mut rng = self.base.clone();
                rng.set_stream(self.key(c));
                for w in out.iter_mut() {
                    *w = alpha + (1.0 - alpha) * rng.gen::<f64>();
                }
            }
            Law::TwoPoint { alpha } => {
                let mut rng = self.base.clone();
                rng.set_stream(self.key(c));
                for w in out.iter_mut() {
                    *w = if rng.gen::<f64>() < 0.5 { *alpha } else { 1.0 };
                }
            }
        }
    }

    /// The diagonal of `ω(x)`.
    pub fn omega(&self, x: &[i64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.omega_canonical(&self.canonical(x), &mut out);
        out
    }

    /// `a(x) = ω(x) / tr ω(x)` written into `out`.
    pub fn a_into(&self, x: &[i64], out: &mut [f64]) {
        self.omega_canonical(&self.canonical(x), out);
        normalize(out);
    }

    pub fn a(&self, x: &[i64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.a_into(x, &mut out);
        out
    }

    /// `a` at every site of `domain`, flattened as `n × d`.
    pub fn a_table(&self, domain: &GridDomain) -> Result<Vec<f64>> {
        if domain.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: domain.dim() });
        }
        let d = self.dim;
        let mut out = vec![0.0; domain.len() * d];
        if let Geometry::Torus(l) = self.geometry {
            // Periodic field: sample one period and look it up.
            let period = GridDomain::torus(l, d)?;
            let mut cell = vec![0.0; period.len() * d];
            cell.par_chunks_mut(d).enumerate().for_each(|(i, w)| {
                self.omega_canonical(period.coords(i), w);
                normalize(w);
            });
            out.par_chunks_mut(d).enumerate().for_each(|(i, w)| {
                let j = period.index_of(&self.canonical(domain.coords(i))).unwrap();
                w.copy_from_slice(&cell[j * d..(j + 1) * d]);
            });
        } else {
            out.par_chunks_mut(d).enumerate().for_each(|(i, w)| self.a_into(domain.coords(i), w));
        }
        Ok(out)
    }

    /// The view `θ_z ω`, whose value at `x` is this field's value at `x + z`.
    pub fn shifted(&self, z: &[i64]) -> EnvironmentField {
        let s = self.sign();
        let mut out = self.clone();
        for (t, &zi) in out.translation.iter_mut().zip(z) {
            *t += s * zi;
        }
        out
    }
}

fn normalize(w: &mut [f64]) {
    let tr: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= tr;
    }
}

pub fn sample_environment(spec: &DistributionSpec, dim: usize, seed: u64, geometry: Geometry) -> Result<EnvironmentField> {
    let law = spec.validate(dim)?;
    if let Geometry::Torus(l) = geometry {
        if l < 3 {
            return Err(Error::InvalidParameter(format!("environment period {l} must be >= 3")));
        }
    }
    Ok(EnvironmentField {
        spec: spec.clone(),
        law,
        dim,
        seed,
        geometry,
        orientation: Orientation::Identity,
        translation: vec![0; dim],
        base: ChaCha8Rng::seed_from_u64(seed),
        bits: (64 / dim as u32).min(32),
    })
}

/// `ω̃(x) = ω(-x)`.
pub fn reflect(env: &EnvironmentField) -> EnvironmentField {
    let mut out = env.clone();
    out.orientation = match env.orientation {
        Orientation::Identity => Orientation::Reflected,
        Orientation::Reflected => Orientation::Identity,
    };
    out
}

/// Normalised coefficients and the jump kernel at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionCoeffs {
    pub a: Vec<f64>,
    /// `ω(x, x + e)` in direction order `+e_1, -e_1, ...`.
    pub kernel: Vec<f64>,
}

pub fn transition_coeffs(env: &EnvironmentField, x: &Site) -> TransitionCoeffs {
    let a = env.a(x.coords());
    let kernel = a.iter().flat_map(|&ai| [ai / 2.0, ai / 2.0]).collect();
    TransitionCoeffs { a, kernel }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiKind {
    ConstantOne,
    FirstCoefficient,
    /// `clamp(Σ_i w_i a_i, -bound, bound)`.
    CustomBounded,
}

/// A bounded function of `ω(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub kind: PsiKind,
    #[serde(default = "one")]
    pub bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

impl Default for PsiSpec {
    fn default() -> Self {
        PsiSpec { kind: PsiKind::ConstantOne, bound: 1.0, weights: None }
    }
}

impl PsiSpec {
    pub fn first_coefficient() -> Self {
        PsiSpec { kind: PsiKind::FirstCoefficient, bound: 1.0, weights: None }
    }

    pub fn is_constant(&self) -> bool {
        self.kind == PsiKind::ConstantOne
    }

    /// `ψ` as a function of the normalised coefficients at the site.
    pub fn of_a(&self, a: &[f64]) -> f64 {
        match self.kind {
            PsiKind::ConstantOne => 1.0,
            PsiKind::FirstCoefficient => a[0],
            PsiKind::CustomBounded => {
                let w = self.weights.as_deref().unwrap_or(&[]);
                let v: f64 = w.iter().zip(a).map(|(w, a)| w * a).sum();
                v.clamp(-self.bound, self.bound)
            }
        }
    }
}

/// `ψ(θ_x ω)`.
pub fn psi_eval(env: &EnvironmentField, x: &Site, spec: &PsiSpec) -> f64 {
    spec.of_a(&env.a(x.coords()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform3(seed: u64) -> EnvironmentField {
        sample_environment(&DistributionSpec::uniform(0.05), 3, seed, Geometry::InfiniteWindow).unwrap()
    }

    #[test]
    fn values_are_pure_functions_of_the_site() {
        let env = uniform3(7);
        let sites: Vec<Vec<i64>> = (0..50).map(|i| vec![i % 7 - 3, i / 7 - 3, (i * 13) % 11 - 5]).collect();
        let forward: Vec<Vec<f64>> = sites.iter().map(|s| env.omega(s)).collect();
        let backward: Vec<Vec<f64>> = sites.iter().rev().map(|s| env.omega(s)).collect();
        for (f, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(f, b);
        }
        let again = uniform3(7);
        assert_eq!(again.omega(&[1, 2, 3]), env.omega(&[1, 2, 3]));
    }

    #[test]
    fn ellipticity_holds_on_many_sites() {
        for spec in [DistributionSpec::uniform(0.05), DistributionSpec::two_point(0.1), DistributionSpec::uniform(1.0 / 6.0)] {
            let env = sample_environment(&spec, 3, 11, Geometry::InfiniteWindow).unwrap();
            let dom = GridDomain::cube(11, 3).unwrap();
            let a = env.a_table(&dom).unwrap();
            assert!(a.len() >= 3 * 10_000);
            for w in a.chunks(3) {
                assert!(w.iter().all(|&x| x >= 2.0 * spec.kappa), "{w:?}");
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn different_seeds_differ_on_torus() {
        let spec = DistributionSpec::uniform(0.05);
        let dom = GridDomain::torus(16, 3).unwrap();
        let a1 = sample_environment(&spec, 3, 1, Geometry::Torus(16)).unwrap().a_table(&dom).unwrap();
        let a2 = sample_environment(&spec, 3, 2, Geometry::Torus(16)).unwrap().a_table(&dom).unwrap();
        assert!(a1.iter().zip(&a2).any(|(x, y)| x != y));
    }

    #[test]
    fn invalid_laws_are_rejected() {
        let too_small_alpha = DistributionSpec {
            dist: DistName::UniformDiagonal,
            kappa: 0.1,
            params: DistParams { alpha: Some(0.1), diag: None },
        };
        assert!(matches!(too_small_alpha.validate(3), Err(Error::EllipticityViolation(_))));
        assert!(DistributionSpec::uniform(0.2).validate(3).is_err());
        assert!(DistributionSpec::constant(vec![1.0, 9.0], 0.125).validate(2).is_err());
        assert!(DistributionSpec::constant(vec![1.0, 3.0], 0.125).validate(2).is_ok());
        assert!(DistributionSpec::constant(vec![1.0, 3.0], 0.125).validate(3).is_err());
    }

    #[test]
    fn transition_coefficients() {
        let env = sample_environment(&DistributionSpec::constant(vec![1.0, 3.0], 0.1), 2, 0, Geometry::InfiniteWindow).unwrap();
        let t = transition_coeffs(&env, &Site::new(vec![4, -2]));
        assert_eq!(t.a, vec![0.25, 0.75]);
        assert_eq!(t.kernel, vec![0.125, 0.125, 0.375, 0.375]);
        let iso = sample_environment(&DistributionSpec::constant(vec![1.0; 3], 0.1), 3, 0, Geometry::InfiniteWindow).unwrap();
        let t = transition_coeffs(&iso, &Site::origin(3));
        assert!(t.kernel.iter().all(|&k| (k - 1.0 / 6.0).abs() < 1e-16));
        let env = uniform3(3);
        for x in [[0, 0, 0], [5, -3, 2]] {
            let t = transition_coeffs(&env, &Site::new(x.to_vec()));
            assert!((t.a.iter().sum::<f64>() - 1.0).abs() <= f64::EPSILON);
            assert!((t.kernel.iter().sum::<f64>() - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn reflection_is_an_involution() {
        let env = uniform3(5);
        let r = reflect(&env);
        let rr = reflect(&r);
        assert_eq!(r.omega(&[2, 0, 1]), env.omega(&[-2, 0, -1]));
        for x in [[0, 0, 0], [1, 2, 3], [-4, 0, 7]] {
            assert_eq!(rr.omega(&x), env.omega(&x));
        }
        let t = sample_environment(&DistributionSpec::two_point(0.05), 3, 9, Geometry::Torus(5)).unwrap();
        assert_eq!(reflect(&t).omega(&[1, 0, 0]), t.omega(&[4, 0, 0]));
    }

    #[test]
    fn reflection_preserves_single_site_histogram() {
        // Equality in law: bin a_1 over the same window for env and its reflection.
        let env = uniform3(21);
        let r = reflect(&env);
        let dom = GridDomain::cube(11, 3).unwrap();
        let hist = |e: &EnvironmentField| {
            let mut h = [0usize; 10];
            for i in 0..dom.len() {
                let x = dom.site(i).offset(&[30, 0, 0]);
                let a = e.a(x.coords());
                h[((a[0] - 0.05) / 0.08).clamp(0.0, 9.0) as usize] += 1;
            }
            h
        };
        let (h1, h2) = (hist(&env), hist(&r));
        let n = dom.len() as f64;
        // Two-sample chi-square with 9 degrees of freedom; 0.999 quantile is 27.9.
        let chi2: f64 = h1
            .iter()
            .zip(&h2)
            .filter(|(a, b)| **a + **b > 0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2) / (a + b) as f64)
            .sum();
        assert!(chi2 < 27.9, "chi2 = {chi2}, n = {n}");
    }

    #[test]
    fn shift_consistency() {
        let env = uniform3(8);
        for z in [[1, 0, 0], [-3, 2, 5]] {
            let view = env.shifted(&z);
            for x in [[0, 0, 0], [2, -1, 4]] {
                let xz: Vec<i64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
                assert_eq!(view.omega(&x), env.omega(&xz));
            }
        }
        let r = reflect(&env).shifted(&[1, 1, 1]);
        assert_eq!(r.omega(&[0, 0, 0]), env.omega(&[-1, -1, -1]));
    }

    #[test]
    fn torus_values_are_periodic() {
        let env = sample_environment(&DistributionSpec::uniform(0.05), 2, 4, Geometry::Torus(4)).unwrap();
        assert_eq!(env.omega(&[1, 2]), env.omega(&[5, -2]));
    }

    #[test]
    fn psi_values() {
        let env = sample_environment(&DistributionSpec::constant(vec![1.0, 3.0], 0.1), 2, 0, Geometry::InfiniteWindow).unwrap();
        let x = Site::new(vec![0, 0]);
        assert_eq!(psi_eval(&env, &x, &PsiSpec::default()), 1.0);
        assert_eq!(psi_eval(&env, &x, &PsiSpec::first_coefficient()), 0.25);
        let env = uniform3(1);
        let custom = PsiSpec { kind: PsiKind::CustomBounded, bound: 0.3, weights: Some(vec![2.0, -1.0, 0.5]) };
        let dom = GridDomain::cube(11, 3).unwrap();
        for i in 0..dom.len() {
            let v = psi_eval(&env, &dom.site(i), &custom);
            assert!(v.abs() <= 0.3);
            assert!(psi_eval(&env, &dom.site(i), &PsiSpec::first_coefficient()).abs() <= 1.0);
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = DistributionSpec::uniform(0.05);
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"dist\":\"uniform-diagonal\""));
        let back: DistributionSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let psi: PsiSpec = serde_json::from_str(r#"{"kind":"first-coefficient"}"#).unwrap();
        assert_eq!(psi, PsiSpec::first_coefficient());
    }
}
