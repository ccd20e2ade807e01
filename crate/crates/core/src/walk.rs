//! Monte Carlo simulation of the walk in a fixed environment.
//!
//! From `x` the walk jumps to `x ± e_i` with probability `a_i(x) / 2`. In
//! continuous time the same jump chain is run with unit-rate exponential
//! holding times. Walk randomness is a ChaCha stream keyed by
//! `(seed, walk index)`, independent of the environment's generator.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::EnvironmentField;
use crate::error::{Error, Result};
use crate::lattice::{direction_sign, GridDomain, GridFunction, Site};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum WalkMode {
    /// `horizon` jumps.
    Discrete,
    /// Run until time `time`; the horizon argument is ignored.
    Continuous { time: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkSummary {
    pub start: Site,
    /// Number of jumps performed.
    pub steps: u64,
    /// Unwrapped final position.
    pub endpoint: Site,
    /// Visits of `X_0 .. X_{steps-1}` per torus site; empty off the torus.
    pub occupation: Vec<u64>,
    /// Jumps taken in each of the `2d` directions.
    pub jumps: Vec<u64>,
    /// `Σ_i Σ_j (X_n - X_0)_i (X_n - X_0)_j` for this single walk.
    pub displacement_moments: Vec<f64>,
}

/// A walk space with its coefficient table, reusable across many walks.
#[derive(Clone, Debug)]
pub struct Walker {
    space: Arc<GridDomain>,
    a: Vec<f64>,
}

impl Walker {
    /// `space` is a torus (the walk wraps) or a finite window the walk must not leave.
    pub fn new(env: &EnvironmentField, space: &Arc<GridDomain>) -> Result<Walker> {
        if env.dim() != space.dim() {
            return Err(Error::DimensionMismatch { expected: space.dim(), actual: env.dim() });
        }
        Ok(Walker { space: space.clone(), a: env.a_table(space)? })
    }

    pub fn space(&self) -> &Arc<GridDomain> {
        &self.space
    }

    pub fn coefficients(&self, idx: usize) -> &[f64] {
        let d = self.space.dim();
        &self.a[idx * d..(idx + 1) * d]
    }

    pub fn simulate(&self, start: &Site, horizon: u64, mode: WalkMode, seed: u64, walk: u64) -> Result<WalkSummary> {
        let dom = &self.space;
        let d = dom.dim();
        if start.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: start.dim() });
        }
        let mut idx = dom.index(start).ok_or_else(|| Error::OutOfDomain(start.coords().to_vec()))?;
        let torus = dom.is_torus();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(walk);
        let mut pos = start.coords().to_vec();
        let mut occupation = if torus { vec![0u64; dom.len()] } else { Vec::new() };
        let mut jumps = vec![0u64; 2 * d];
        let mut steps = 0u64;
        let mut clock = 0.0;
        loop {
            match mode {
                WalkMode::Discrete => {
                    if steps >= horizon {
                        break;
                    }
                }
                WalkMode::Continuous { time } => {
                    clock += rng.sample::<f64, _>(Exp1);
                    if clock > time {
                        break;
                    }
                }
            }
            if torus {
                occupation[idx] += 1;
            }
            let a = &self.a[idx * d..(idx + 1) * d];
            let total: f64 = a.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut dir = 2 * d - 1;
            for (k, ak) in a.iter().enumerate() {
                let half = 0.5 * ak;
                if u < half {
                    dir = 2 * k;
                    break;
                }
                u -= half;
                if u < half {
                    dir = 2 * k + 1;
                    break;
                }
                u -= half;
            }
            jumps[dir] += 1;
            pos[dir / 2] += direction_sign(dir);
            idx = match dom.neighbor(idx, dir) {
                Some(next) if torus || dom.is_interior(next) => next,
                _ => return Err(Error::WindowExit(pos)),
            };
            steps += 1;
        }
        let disp: Vec<f64> = pos.iter().zip(start.coords()).map(|(p, s)| (p - s) as f64).collect();
        let displacement_moments = (0..d * d).map(|ij| disp[ij / d] * disp[ij % d]).collect();
        Ok(WalkSummary { start: start.clone(), steps, endpoint: Site::new(pos), occupation, jumps, displacement_moments })
    }

    /// Occupation average of `f(a(X_n))` along one walk: the environment seen from the particle.
    pub fn running_average(&self, summary: &WalkSummary, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
        if summary.steps == 0 || summary.occupation.len() != self.space.len() {
            return Err(Error::InvalidData("running averages need a non-empty torus walk".into()));
        }
        let total: f64 = summary
            .occupation
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| c as f64 * f(self.coefficients(i)))
            .sum();
        Ok(total / summary.steps as f64)
    }
}

/// One walk; see [`Walker::simulate`].
pub fn simulate(
    env: &EnvironmentField,
    space: &Arc<GridDomain>,
    start: &Site,
    horizon: u64,
    mode: WalkMode,
    seed: u64,
) -> Result<WalkSummary> {
    Walker::new(env, space)?.simulate(start, horizon, mode, seed, 0)
}

/// Normalised visit frequencies of a torus walk.
pub fn occupation_density(summary: &WalkSummary, torus: &Arc<GridDomain>) -> Result<GridFunction> {
    if summary.steps == 0 {
        return Err(Error::InvalidData("walk has zero steps".into()));
    }
    if summary.occupation.len() != torus.len() {
        return Err(Error::InvalidData("occupation does not match the torus".into()));
    }
    let n = summary.steps as f64;
    GridFunction::new(torus.clone(), summary.occupation.iter().map(|&c| c as f64 / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcltEstimate {
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub n_walks: usize,
    pub horizon: u64,
    /// Set when the horizon is shorter than `L²`.
    pub short_horizon: bool,
}

impl QcltEstimate {
    pub fn dim(&self) -> usize {
        (self.covariance.len() as f64).sqrt().round() as usize
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.dim() + j]
    }
}

/// Averages `X_n ⊗ X_n / n` over `n_walks` walks from the origin.
pub fn qclt_estimate(env: &EnvironmentField, torus: &Arc<GridDomain>, n_walks: usize, horizon: u64, seed: u64) -> Result<QcltEstimate> {
    let side = torus
        .torus_side()
        .ok_or_else(|| Error::InvalidDomain("QCLT estimates run on a torus".into()))?;
    if n_walks < 2 || horizon == 0 {
        return Err(Error::InvalidParameter("need at least 2 walks and a positive horizon".into()));
    }
    let walker = Walker::new(env, torus)?;
    let origin = Site::origin(torus.dim());
    let moments: Vec<Vec<f64>> = (0..n_walks as u64)
        .into_par_iter()
        .map(|w| walker.simulate(&origin, horizon, WalkMode::Discrete, seed, w).map(|s| s.displacement_moments))
        .collect::<Result<_>>()?;
    let (cov, se) = mean_and_se(&moments, horizon as f64);
    Ok(QcltEstimate {
        covariance: cov,
        standard_errors: se,
        n_walks,
        horizon,
        short_horizon: (horizon as f64) < (side * side) as f64,
    })
}

fn mean_and_se(samples: &[Vec<f64>], scale: f64) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let width = samples[0].len();
    let mut mean = vec![0.0; width];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / scale;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v / scale - m).powi(2);
        }
    }
    let se = var.iter().map(|v| (v / (n - 1.0) / n).sqrt()).collect();
    (mean, se)
}

/// CSV rows `seed,walk,steps,end_1..end_d`.
pub fn summaries_csv(seed: u64, summaries: &[WalkSummary]) -> String {
    let d = summaries.first().map(|s| s.endpoint.dim()).unwrap_or(0);
    let mut out = String::from("seed,walk,steps");
    for i in 1..=d {
        out.push_str(&format!(",end_{i}"));
    }
    out.push('\n');
    for (w, s) in summaries.iter().enumerate() {
        out.push_str(&format!("{seed},{w},{}", s.steps));
        for c in s.endpoint.coords() {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}
