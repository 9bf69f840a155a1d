//! Identifiability kernels `K1`, `K4`, `K = K1 + K4` on spatial grids, the
//! integral operator `L_K1` and its spectrum.
//!
//! Densities come either from a closed-form Gaussian family (Brownian motion,
//! Ornstein–Uhlenbeck) or from per-time histograms of an ensemble.

use crate::density::DensityGrid;
use crate::error::{validation, Error, Result};
use crate::special::upper_incomplete_gamma;
use crate::state_model::{InitialDistribution, StateModelSpec, TimeGrid};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const DEFAULT_TIME_NODES: usize = 200;
pub const DEFAULT_TIME_EPSILON: f64 = 1e-3;

/// State laws with Gaussian marginals and a known adjoint factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnalyticDensityFamily {
    /// `dX = dB`, `X_0 = x0`.
    Brownian { x0: f64 },
    /// `dX = -theta X dt + dB`, `X_0 = x0`.
    OrnsteinUhlenbeck { theta: f64, x0: f64 },
    /// Ornstein–Uhlenbeck started from `N(0, 1/(2 theta))`.
    StationaryOu { theta: f64 },
}

impl AnalyticDensityFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AnalyticDensityFamily::Brownian { x0 } if !x0.is_finite() => validation("x0 must be finite"),
            AnalyticDensityFamily::OrnsteinUhlenbeck { theta, x0 } if !(theta > 0.0) || !x0.is_finite() => {
                validation("OU needs theta > 0 and finite x0")
            }
            AnalyticDensityFamily::StationaryOu { theta } if !(theta > 0.0) => validation("OU needs theta > 0"),
            _ => Ok(()),
        }
    }

    fn theta(&self) -> f64 {
        match *self {
            AnalyticDensityFamily::Brownian { .. } => 0.0,
            AnalyticDensityFamily::OrnsteinUhlenbeck { theta, .. } | AnalyticDensityFamily::StationaryOu { theta } => theta,
        }
    }

    /// The state model and initial law this family describes.
    pub fn model(&self) -> (StateModelSpec, InitialDistribution) {
        match *self {
            AnalyticDensityFamily::Brownian { x0 } => (StateModelSpec::brownian(), InitialDistribution::PointMass(x0)),
            AnalyticDensityFamily::OrnsteinUhlenbeck { theta, x0 } => {
                (StateModelSpec::ornstein_uhlenbeck(theta), InitialDistribution::PointMass(x0))
            }
            AnalyticDensityFamily::StationaryOu { theta } => {
                (StateModelSpec::ornstein_uhlenbeck(theta), InitialDistribution::gaussian(0.0, 0.5 / theta))
            }
        }
    }

    /// Mean and variance of `X_t`.
    pub fn mean_variance(&self, t: f64) -> (f64, f64) {
        match *self {
            AnalyticDensityFamily::Brownian { x0 } => (x0, t),
            AnalyticDensityFamily::OrnsteinUhlenbeck { theta, x0 } => {
                ((-theta * t).exp() * x0, -(-2.0 * theta * t).exp_m1() / (2.0 * theta))
            }
            AnalyticDensityFamily::StationaryOu { theta } => (0.0, 0.5 / theta),
        }
    }

    /// `p_t(x)`; zero at `t <= 0` for point-mass starts.
    pub fn density(&self, t: f64, x: f64) -> f64 {
        let (m, v) = self.mean_variance(t);
        if !(v > 0.0) {
            return 0.0;
        }
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
    }

    /// `phi2(t, x)` with `L* p_t = phi2 p_t`.
    pub fn phi2(&self, t: f64, x: f64) -> f64 {
        let (m, v) = self.mean_variance(t);
        let theta = self.theta();
        let z = x - m;
        0.5 * (z * z / (v * v) - 1.0 / v) + theta - theta * x * z / v
    }

    /// `L* p_t(x) = -(a p_t)'(x) + 1/2 p_t''(x)`.
    pub fn adjoint(&self, t: f64, x: f64) -> f64 {
        let p = self.density(t, x);
        if p == 0.0 {
            0.0
        } else {
            self.phi2(t, x) * p
        }
    }
}

/// `|d| Gamma(-1/2, d^2 / 2T)`, continuous at `d = 0`.
fn brownian_q(d: f64, t_final: f64) -> Result<f64> {
    if d == 0.0 {
        return Ok(2.0 * (2.0 * t_final).sqrt());
    }
    Ok(d.abs() * upper_incomplete_gamma(-0.5, d * d / (2.0 * t_final))?)
}

/// Closed-form `(1/T) int_0^T p_t(x) dt` for Brownian motion from `x0`.
pub fn brownian_rho_bar(x0: f64, t_final: f64, x: f64) -> Result<f64> {
    if !(t_final > 0.0) {
        return validation("horizon must be positive");
    }
    Ok(brownian_q(x - x0, t_final)? / (2.0 * PI.sqrt() * t_final))
}

/// Closed-form continuous-time `K1(x, y)` for Brownian motion from `x0`.
pub fn brownian_k1(x0: f64, t_final: f64, x: f64, y: f64) -> Result<f64> {
    if !(t_final > 0.0) {
        return validation("horizon must be positive");
    }
    let (dx, dy) = (x - x0, y - x0);
    if dx == 0.0 && dy == 0.0 {
        return Ok(f64::INFINITY);
    }
    let g0 = upper_incomplete_gamma(0.0, (dx * dx + dy * dy) / (2.0 * t_final))?;
    Ok(2.0 * t_final * g0 / (brownian_q(dx, t_final)? * brownian_q(dy, t_final)?))
}

/// Nodes and unit-mass weights approximating a time average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TimeRule {
    /// Observation times `t_1..t_L`, each with weight `1/L`.
    pub fn discrete(grid: TimeGrid) -> Self {
        let l = grid.steps;
        TimeRule { nodes: (1..=l).map(|k| grid.time(k)).collect(), weights: vec![1.0 / l as f64; l] }
    }

    /// Trapezoid rule on `count` uniform nodes over `[epsilon, T]`.
    pub fn continuous(t_final: f64, count: usize, epsilon: f64) -> Result<Self> {
        if !(t_final > epsilon) || !(epsilon >= 0.0) || count < 2 {
            return validation("continuous time rule needs 0 <= epsilon < T and at least two nodes");
        }
        let h = (t_final - epsilon) / (count - 1) as f64;
        let nodes = (0..count).map(|k| epsilon + k as f64 * h).collect();
        let weights = (0..count)
            .map(|k| if k == 0 || k == count - 1 { 0.5 * h } else { h } / (t_final - epsilon))
            .collect();
        Ok(TimeRule { nodes, weights })
    }

    pub fn default_continuous(t_final: f64) -> Result<Self> {
        Self::continuous(t_final, DEFAULT_TIME_NODES, DEFAULT_TIME_EPSILON)
    }

    /// Composite Simpson rule on `[a, b]` with an even number of intervals.
    pub fn simpson(a: f64, b: f64, intervals: usize) -> Result<Self> {
        if !(b > a) || intervals < 2 || intervals % 2 == 1 {
            return validation("simpson rule needs a < b and an even interval count");
        }
        let h = (b - a) / intervals as f64;
        let nodes = (0..=intervals).map(|k| a + k as f64 * h).collect();
        let weights = (0..=intervals)
            .map(|k| {
                let c = if k == 0 || k == intervals {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0 / (b - a)
            })
            .collect();
        Ok(TimeRule { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    K1,
    K4,
    K,
}

/// Kernel values on a uniform spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub points: Vec<f64>,
    /// Spacing of `points` (meaningful for uniform grids only).
    pub h: f64,
    /// Time-averaged density at `points` under the same time rule.
    pub rho: Vec<f64>,
    pub k1: DMatrix<f64>,
    pub k4: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

impl KernelGrid {
    pub fn kernel(&self, kind: KernelKind) -> &DMatrix<f64> {
        match kind {
            KernelKind::K1 => &self.k1,
            KernelKind::K4 => &self.k4,
            KernelKind::K => &self.k,
        }
    }

    /// Long-format table `x,y,k1,k4,k`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,k1,k4,k\n");
        for (i, x) in self.points.iter().enumerate() {
            for (j, y) in self.points.iter().enumerate() {
                s.push_str(&format!("{x},{y},{:e},{:e},{:e}\n", self.k1[(i, j)], self.k4[(i, j)], self.k[(i, j)]));
            }
        }
        s
    }

    /// Assemble from per-node densities `p[k][i]` and adjoints `q[k][i]`.
    fn assemble(points: Vec<f64>, weights: &[f64], p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return validation("kernel grid needs points");
        }
        let h = if n > 1 { points[1] - points[0] } else { 1.0 };
        let nt = weights.len();
        let rho: Vec<f64> = (0..n).map(|i| (0..nt).map(|k| weights[k] * p[k][i]).sum()).collect();
        let scaled = |rows: &[Vec<f64>]| {
            DMatrix::from_fn(nt, n, |k, i| weights[k].sqrt() * rows[k][i] / if rho[i] > 0.0 { rho[i] } else { 1.0 })
        };
        let mask = |m: DMatrix<f64>| {
            DMatrix::from_fn(n, n, |i, j| if rho[i] > 0.0 && rho[j] > 0.0 { m[(i, j)] } else { 0.0 })
        };
        let sp = scaled(p);
        let sq = scaled(q);
        let k1 = mask(sp.transpose() * &sp);
        let k4 = mask(sq.transpose() * &sq);
        let k = &k1 + &k4;
        Ok(KernelGrid { points, h, rho, k1, k4, k })
    }
}

/// Kernels for a closed-form family under a time rule.
pub fn kernel_grids_analytic(family: &AnalyticDensityFamily, rule: &TimeRule, points: &[f64]) -> Result<KernelGrid> {
    family.validate()?;
    if rule.is_empty() || rule.weights.len() != rule.nodes.len() {
        return validation("time rule is empty or inconsistent");
    }
    let (p, q): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rule
        .nodes
        .par_iter()
        .map(|&t| {
            let p = points.iter().map(|&x| family.density(t, x)).collect();
            let q = points.iter().map(|&x| family.adjoint(t, x)).collect();
            (p, q)
        })
        .unzip();
    KernelGrid::assemble(points.to_vec(), &rule.weights, &p, &q)
}

/// Discrete-time kernels from the per-time histograms of a density grid.
///
/// `L* p` is replaced by the time derivative of the histograms (central
/// differences inside, one-sided at the ends).
pub fn kernel_grids_empirical(d: &DensityGrid, dt: f64) -> Result<KernelGrid> {
    let per_time = d
        .per_time
        .as_ref()
        .ok_or_else(|| Error::Validation("density grid carries no per-time histograms".into()))?;
    let l = per_time.len();
    if l < 2 || !(dt > 0.0) {
        return validation("empirical kernels need at least two times and dt > 0");
    }
    let q: Vec<Vec<f64>> = (0..l)
        .map(|k| {
            let (a, b, span) = match k {
                0 => (0, 1, dt),
                k if k == l - 1 => (l - 2, l - 1, dt),
                k => (k - 1, k + 1, 2.0 * dt),
            };
            per_time[b].iter().zip(&per_time[a]).map(|(pb, pa)| (pb - pa) / span).collect()
        })
        .collect();
    KernelGrid::assemble(d.centers.clone(), &vec![1.0 / l as f64; l], per_time, &q)
}

/// Leading eigenpairs of `L_K h(y) = int h(x) K(x, y) rho(x) dx` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpectrum {
    pub values: Vec<f64>,
    /// Eigenfunctions at the grid points, orthonormal in the discrete `L^2(rho)`.
    pub functions: Vec<Vec<f64>>,
}

impl KernelSpectrum {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,eigenvalue\n");
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{},{v:e}\n", i + 1));
        }
        s
    }
}

pub fn kernel_eigen(kg: &KernelGrid, kind: KernelKind, count: usize) -> Result<KernelSpectrum> {
    let kernel = kg.kernel(kind);
    let uniform = kg.points.windows(2).all(|w| ((w[1] - w[0]) - kg.h).abs() <= 1e-9 * kg.h.abs().max(1.0));
    if !(kg.h > 0.0) || !uniform {
        return validation("the operator needs increasing, uniform grid points");
    }
    let live: Vec<usize> = (0..kg.points.len()).filter(|&i| kg.rho[i] > 0.0).collect();
    let n = live.len();
    if n == 0 {
        return validation("density vanishes on the whole grid");
    }
    let count = if count > n {
        log::warn!("requested {count} eigenpairs but only {n} grid points carry mass");
        n
    } else {
        count
    };
    let root: Vec<f64> = live.iter().map(|&i| (kg.rho[i] * kg.h).sqrt()).collect();
    let m = DMatrix::from_fn(n, n, |a, b| root[a] * kernel[(live[a], live[b])] * root[b]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::with_capacity(count);
    let mut functions = Vec::with_capacity(count);
    for &j in order.iter().take(count) {
        values.push(eig.eigenvalues[j]);
        let v: DVector<f64> = eig.eigenvectors.column(j).into_owned();
        let mut psi = vec![0.0; kg.points.len()];
        for (a, &i) in live.iter().enumerate() {
            psi[i] = v[a] / root[a];
        }
        functions.push(psi);
    }
    Ok(KernelSpectrum { values, functions })
}
