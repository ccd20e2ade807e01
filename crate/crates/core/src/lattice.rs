//! Discrete geometry of `Z^d`: balls, boxes and tori with an interior/boundary
//! classification, dense site indexing, and the difference stencils.
//!
//! Directions are numbered `2i` for `+e_i` and `2i + 1` for `-e_i`, so a site
//! has `2d` neighbours in the order `+e_1, -e_1, +e_2, -e_2, ...`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NO_SITE: u32 = u32::MAX;

/// A point of `Z^d`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(Vec<i64>);

impl Site {
    pub fn new(coords: Vec<i64>) -> Self {
        Site(coords)
    }

    pub fn origin(dim: usize) -> Self {
        Site(vec![0; dim])
    }

    /// The unit vector `e_i` (zero based axis).
    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut c = vec![0; dim];
        c[axis] = 1;
        Site(c)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Neighbour in direction `dir` (see module docs for the numbering).
    pub fn step(&self, dir: usize) -> Site {
        let mut c = self.0.clone();
        c[dir / 2] += direction_sign(dir);
        Site(c)
    }

    pub fn negated(&self) -> Site {
        Site(self.0.iter().map(|&x| -x).collect())
    }

    pub fn offset(&self, by: &[i64]) -> Site {
        Site(self.0.iter().zip(by).map(|(a, b)| a + b).collect())
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Vec<i64>> for Site {
    fn from(c: Vec<i64>) -> Self {
        Site(c)
    }
}

impl From<&[i64]> for Site {
    fn from(c: &[i64]) -> Self {
        Site(c.to_vec())
    }
}

pub fn direction_sign(dir: usize) -> i64 {
    if dir % 2 == 0 {
        1
    } else {
        -1
    }
}

pub fn norm(c: &[i64]) -> f64 {
    c.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    Ball { radius: f64 },
    Box { half_width: i64 },
    Torus { side: i64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteClass {
    Interior,
    Boundary,
}

/// Dense lookup over the bounding cube `[-half, half]^d`.
#[derive(Clone, Debug)]
struct CubeTable {
    half: i64,
    table: Vec<u32>,
}

impl CubeTable {
    fn slot(&self, c: &[i64]) -> Option<usize> {
        let w = 2 * self.half + 1;
        let mut s = 0i64;
        for &x in c {
            if x < -self.half || x > self.half {
                return None;
            }
            s = s * w + (x + self.half);
        }
        Some(s as usize)
    }
}

/// A finite piece of `Z^d` with every site tagged interior or boundary.
///
/// Sites are stored in lexicographic order of their coordinates (first axis
/// most significant). For a torus all sites are interior and coordinates live
/// in `[0, L)`.
#[derive(Clone, Debug)]
pub struct GridDomain {
    dim: usize,
    kind: DomainKind,
    coords: Vec<i64>,
    class: Vec<SiteClass>,
    interior_count: usize,
    table: Option<CubeTable>,
}

impl GridDomain {
    /// The discrete ball: interior `{x in B_R : dist(x, sphere of radius R) >= 1}`
    /// together with its discrete boundary.
    pub fn ball(radius: f64, dim: usize) -> Result<Arc<GridDomain>> {
        if !(radius >= 1.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!("ball radius {radius} must be >= 1")));
        }
        check_dim(dim)?;
        // |x| < R and R - |x| >= 1, i.e. |x| <= R - 1.
        let inner = (radius - 1.0) * (radius - 1.0);
        let is_interior = |c: &[i64]| (c.iter().map(|&x| x * x).sum::<i64>() as f64) <= inner;
        let half = radius.ceil() as i64 + 1;
        Ok(Arc::new(Self::carve(dim, DomainKind::Ball { radius }, half, is_interior)))
    }

    /// The cube `|x|_inf <= H - 1` as interior, closed by its discrete boundary.
    pub fn cube(half_width: i64, dim: usize) -> Result<Arc<GridDomain>> {
        if half_width < 1 {
            return Err(Error::InvalidParameter(format!("box half-width {half_width} must be >= 1")));
        }
        check_dim(dim)?;
        let is_interior = |c: &[i64]| c.iter().all(|&x| x.abs() < half_width);
        Ok(Arc::new(Self::carve(dim, DomainKind::Box { half_width }, half_width, is_interior)))
    }

    pub fn torus(side: i64, dim: usize) -> Result<Arc<GridDomain>> {
        if side < 3 {
            return Err(Error::InvalidParameter(format!("torus side {side} must be >= 3")));
        }
        check_dim(dim)?;
        let n = (side as usize)
            .checked_pow(dim as u32)
            .filter(|&n| n < NO_SITE as usize)
            .ok_or_else(|| Error::InvalidParameter("torus too large".into()))?;
        let mut coords = Vec::with_capacity(n * dim);
        let mut c = vec![0i64; dim];
        for _ in 0..n {
            coords.extend_from_slice(&c);
            advance(&mut c, 0, side - 1);
        }
        Ok(Arc::new(GridDomain {
            dim,
            kind: DomainKind::Torus { side },
            coords,
            class: vec![SiteClass::Interior; n],
            interior_count: n,
            table: None,
        }))
    }

    fn carve(dim: usize, kind: DomainKind, half: i64, is_interior: impl Fn(&[i64]) -> bool) -> GridDomain {
        let w = (2 * half + 1) as usize;
        let cells = w.pow(dim as u32);
        // Pass 1: mark interior cells of the bounding cube.
        let mut interior = vec![false; cells];
        let mut c = vec![-half; dim];
        for cell in interior.iter_mut() {
            *cell = is_interior(&c);
            advance(&mut c, -half, half);
        }
        // Pass 2: keep interior cells and their outside neighbours, in lex order.
        let strides: Vec<usize> = (0..dim).map(|i| w.pow((dim - 1 - i) as u32)).collect();
        let mut table = vec![NO_SITE; cells];
        let mut coords = Vec::new();
        let mut class = Vec::new();
        let mut interior_count = 0;
        let mut c = vec![-half; dim];
        for slot in 0..cells {
            let keep = if interior[slot] {
                Some(SiteClass::Interior)
            } else {
                let touches = (0..dim).any(|i| {
                    (c[i] < half && interior[slot + strides[i]]) || (c[i] > -half && interior[slot - strides[i]])
                });
                touches.then_some(SiteClass::Boundary)
            };
            if let Some(tag) = keep {
                table[slot] = class.len() as u32;
                coords.extend_from_slice(&c);
                if tag == SiteClass::Interior {
                    interior_count += 1;
                }
                class.push(tag);
            }
            advance(&mut c, -half, half);
        }
        GridDomain { dim, kind, coords, class, interior_count, table: Some(CubeTable { half, table }) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.kind, DomainKind::Torus { .. })
    }

    pub fn torus_side(&self) -> Option<i64> {
        match self.kind {
            DomainKind::Torus { side } => Some(side),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    pub fn interior_count(&self) -> usize {
        self.interior_count
    }

    pub fn boundary_count(&self) -> usize {
        self.len() - self.interior_count
    }

    pub fn coords(&self, idx: usize) -> &[i64] {
        &self.coords[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn site(&self, idx: usize) -> Site {
        Site::from(self.coords(idx))
    }

    pub fn class(&self, idx: usize) -> SiteClass {
        self.class[idx]
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.class[idx] == SiteClass::Interior
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len()).map(|i| self.site(i))
    }

    pub fn interior_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_interior(i))
    }

    pub fn boundary_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.is_interior(i))
    }

    /// Dense index of a coordinate tuple; on a torus coordinates are taken mod `L`.
    pub fn index_of(&self, c: &[i64]) -> Option<usize> {
        if c.len() != self.dim {
            return None;
        }
        match (&self.table, self.kind) {
            (_, DomainKind::Torus { side }) => {
                Some(c.iter().fold(0i64, |acc, &x| acc * side + x.rem_euclid(side)) as usize)
            }
            (Some(t), _) => t.slot(c).map(|s| t.table[s]).filter(|&i| i != NO_SITE).map(|i| i as usize),
            (None, _) => None,
        }
    }

    pub fn index(&self, site: &Site) -> Option<usize> {
        self.index_of(site.coords())
    }

    /// Neighbour of site `idx` in direction `dir`, if it belongs to the domain.
    pub fn neighbor(&self, idx: usize, dir: usize) -> Option<usize> {
        let axis = dir / 2;
        let sign = direction_sign(dir);
        if let DomainKind::Torus { side } = self.kind {
            let x = self.coords[idx * self.dim + axis];
            let stride = (side as usize).pow((self.dim - 1 - axis) as u32);
            let y = (x + sign).rem_euclid(side);
            return Some((idx as i64 + (y - x) * stride as i64) as usize);
        }
        let mut c = self.coords(idx).to_vec();
        c[axis] += sign;
        self.index_of(&c)
    }

    /// Euclidean length of the site's position, using the minimal image on a torus.
    pub fn centered_norm(&self, idx: usize) -> f64 {
        match self.kind {
            DomainKind::Torus { side } => {
                let c = self.coords(idx);
                c.iter()
                    .map(|&x| {
                        let m = if 2 * x > side { x - side } else { x };
                        (m * m) as f64
                    })
                    .sum::<f64>()
                    .sqrt()
            }
            _ => norm(self.coords(idx)),
        }
    }

    /// Indices of sites with centred norm strictly below `r`.
    pub fn within(&self, r: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.centered_norm(i) < r).collect()
    }

    /// Interior sites of the ball of radius `r`, i.e. sites with norm at most `r - 1`.
    pub fn within_inner_ball(&self, r: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.is_interior(i) && self.centered_norm(i) <= r - 1.0)
            .collect()
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!("dimension {dim} must be >= 2")));
    }
    Ok(())
}

/// Odometer increment with the last axis fastest.
fn advance(c: &mut [i64], lo: i64, hi: i64) {
    for x in c.iter_mut().rev() {
        if *x < hi {
            *x += 1;
            return;
        }
        *x = lo;
    }
}

/// A real field on a [`GridDomain`], indexed by the domain's dense index.
#[derive(Clone, Debug)]
pub struct GridFunction {
    domain: Arc<GridDomain>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(domain: Arc<GridDomain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::InvalidData(format!(
                "{} values for a domain of {} sites",
                values.len(),
                domain.len()
            )));
        }
        Ok(GridFunction { domain, values })
    }

    pub fn zeros(domain: Arc<GridDomain>) -> Self {
        let n = domain.len();
        GridFunction { domain, values: vec![0.0; n] }
    }

    pub fn from_fn(domain: Arc<GridDomain>, f: impl Fn(&[i64]) -> f64) -> Self {
        let values = (0..domain.len()).map(|i| f(domain.coords(i))).collect();
        GridFunction { domain, values }
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, site: &Site) -> Option<f64> {
        self.domain.index(site).map(|i| self.values[i])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_over(&self, indices: &[usize]) -> f64 {
        indices.iter().fold(0.0, |m, &i| m.max(self.values[i].abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `alpha * self + beta * other`; both must live on the same domain.
    pub fn combine(&self, alpha: f64, other: &GridFunction, beta: f64) -> Result<GridFunction> {
        if !Arc::ptr_eq(&self.domain, &other.domain) && self.values.len() != other.values.len() {
            return Err(Error::InvalidData("grid functions on different domains".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| alpha * a + beta * b).collect();
        Ok(GridFunction { domain: self.domain.clone(), values })
    }
}

/// Forward/backward differences `∇_e u(x)` (in direction order) and second
/// differences `∇_i² u(x)` at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct Differences {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

pub fn differences(u: &GridFunction, x: &Site) -> Result<Differences> {
    let dom = u.domain();
    let idx = dom.index(x).ok_or_else(|| Error::OutOfDomain(x.coords().to_vec()))?;
    differences_at(u, idx)
}

pub fn differences_at(u: &GridFunction, idx: usize) -> Result<Differences> {
    let dom = u.domain();
    let d = dom.dim();
    let center = u.values[idx];
    let mut first = Vec::with_capacity(2 * d);
    for dir in 0..2 * d {
        let j = dom
            .neighbor(idx, dir)
            .ok_or_else(|| Error::OutOfDomain(dom.site(idx).step(dir).coords().to_vec()))?;
        first.push(u.values[j] - center);
    }
    let second = (0..d).map(|i| u.values[dom.neighbor(idx, 2 * i).unwrap()] + u.values[dom.neighbor(idx, 2 * i + 1).unwrap()] - 2.0 * center).collect();
    Ok(Differences { first, second })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub d: usize,
    pub kind: String,
    #[serde(rename = "R_or_L")]
    pub r_or_l: f64,
    pub site_count: usize,
    pub ordering: String,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `path` (raw little-endian f64 in index order) and `path.json` (header).
pub fn write_grid(u: &GridFunction, path: &Path) -> Result<()> {
    let dom = u.domain();
    let (kind, size) = match dom.kind() {
        DomainKind::Ball { radius } => ("ball", radius),
        DomainKind::Box { half_width } => ("box", half_width as f64),
        DomainKind::Torus { side } => ("torus", side as f64),
    };
    let header = GridHeader {
        d: dom.dim(),
        kind: kind.to_string(),
        r_or_l: size,
        site_count: dom.len(),
        ordering: "lex".to_string(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    for v in u.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Reads a `.grid` file and its sidecar, rebuilding the domain.
pub fn read_grid(path: &Path) -> Result<GridFunction> {
    let header: GridHeader = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    let domain = match header.kind.as_str() {
        "ball" => GridDomain::ball(header.r_or_l, header.d)?,
        "box" => GridDomain::cube(header.r_or_l as i64, header.d)?,
        "torus" => GridDomain::torus(header.r_or_l as i64, header.d)?,
        other => return Err(Error::InvalidData(format!("unknown grid kind {other}"))),
    };
    if domain.len() != header.site_count || header.ordering != "lex" {
        return Err(Error::InvalidData("grid header does not match its domain".into()));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.site_count {
        return Err(Error::InvalidData(format!("expected {} bytes, found {}", 8 * header.site_count, bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    GridFunction::new(domain, values)
}
