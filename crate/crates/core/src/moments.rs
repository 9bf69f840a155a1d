//! Monte Carlo moment matrices of the basis along state trajectories, empirical
//! observation moments, weights and noise corrections.

use crate::bspline::{BSplineBasis, MAX_DEGREE};
use crate::error::{validation, Error, Result};
use crate::observation::NoiseModel;
use crate::state_model::{StateModelSpec, TimeGrid, TrajectoryEnsemble};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// State-side moments for one basis.
///
/// Index `l - 1` of every per-time vector refers to time `t_l`, `l = 1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMoments {
    pub degree: usize,
    pub dim: usize,
    pub grid: TimeGrid,
    pub n_paths: usize,
    /// `E[phi_i(X_{t_l})]`
    pub mean_phi: Vec<DVector<f64>>,
    pub a1bar: DMatrix<f64>,
    /// `E[phi_i phi_j (X_{t_l})]`
    pub a2: Vec<DMatrix<f64>>,
    /// Symmetrised `E[phi_i(X_{t_{l-1}}) phi_j(X_{t_l})]`
    pub a3: Vec<DMatrix<f64>>,
    /// `E[L phi_i(X_{t_{l-1}})] dt`, present when assembled with a state model.
    pub lphi: Option<Vec<DVector<f64>>>,
}

/// Time-indexed empirical moments of the observations, `l = 0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationStats {
    pub grid: TimeGrid,
    pub n_paths: usize,
    /// `(1/M) sum_m Y_{t_l}`
    pub mean: Vec<f64>,
    /// `(1/M) sum_m Y_{t_l}^2`
    pub second: Vec<f64>,
    /// `(1/M) sum_m Y_{t_{l-1}} Y_{t_l}` for `l = 1..=L` (index `l - 1`).
    pub lag: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

/// Everything the loss needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSystem {
    pub dim: usize,
    pub steps: usize,
    pub a1bar: DMatrix<f64>,
    pub a2: Vec<DMatrix<f64>>,
    pub a3: Vec<DMatrix<f64>>,
    pub b1bar: DVector<f64>,
    pub b_tilde1: f64,
    pub b2: Vec<f64>,
    pub b3: Vec<f64>,
    pub weights: Weights,
    /// `C(t_l, t_l)`
    pub noise_c_diag: Vec<f64>,
    /// `C(t_{l-1}, t_l)`
    pub noise_c_off: Vec<f64>,
    pub e4: Option<E4Terms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E4Terms {
    /// `E[L phi_i(X_{t_{l-1}})] dt`
    pub lphi: Vec<DVector<f64>>,
    /// `E[Y_{t_l} - Y_{t_{l-1}}]`
    pub dy: Vec<f64>,
}

fn check_grids(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a.steps != b.steps || (a.dt - b.dt).abs() > 1e-12 * a.dt.abs() {
        return validation(format!(
            "time grids differ: dt={} L={} vs dt={} L={}",
            a.dt, a.steps, b.dt, b.steps
        ));
    }
    Ok(())
}

/// Per-time means `E[phi_i(X_{t_l})]`, `l = 1..=L`.
pub fn mean_phi(x: &TrajectoryEnsemble, basis: &BSplineBasis) -> Vec<DVector<f64>> {
    let m = x.n_paths();
    let p = basis.degree();
    (1..=x.steps())
        .into_par_iter()
        .map(|l| {
            let mut v = DVector::zeros(basis.dim());
            let mut nz = [0.0; MAX_DEGREE + 1];
            for k in 0..m {
                if let Some(first) = basis.eval_nonzero(x.get(k, l), &mut nz) {
                    for a in 0..=p {
                        v[first + a] += nz[a];
                    }
                }
            }
            v / m as f64
        })
        .collect()
}

/// `(1/L) sum_l v_l v_l^T`
pub fn average_outer(vs: &[DVector<f64>]) -> DMatrix<f64> {
    let n = vs.first().map_or(0, |v| v.len());
    let mut a = DMatrix::zeros(n, n);
    for v in vs {
        a.ger(1.0, v, v, 1.0);
    }
    a / vs.len().max(1) as f64
}

/// Assemble state moments from an ensemble `X'` independent of the data.
///
/// Passing `model` also assembles the generator terms, which needs degree >= 2.
pub fn assemble_state_moments(
    xprime: &TrajectoryEnsemble,
    basis: &BSplineBasis,
    model: Option<&StateModelSpec>,
) -> Result<StateMoments> {
    let n = basis.dim();
    let p = basis.degree();
    let m = xprime.n_paths();
    let steps = xprime.steps();
    if model.is_some() && p < 2 {
        return Err(Error::Unsupported(format!("generator moments need degree >= 2, got {p}")));
    }
    if m < 10 * n {
        log::warn!("{m} state trajectories for a {n}-dimensional basis: moments are under-sampled");
    }
    let inv = 1.0 / m as f64;
    let per_time: Vec<_> = (1..=steps)
        .into_par_iter()
        .map(|l| {
            let mut mean = DVector::zeros(n);
            let mut a2 = DMatrix::zeros(n, n);
            let mut a3 = DMatrix::zeros(n, n);
            let mut nz = [0.0; MAX_DEGREE + 1];
            let mut prev = [0.0; MAX_DEGREE + 1];
            for k in 0..m {
                let Some(first) = basis.eval_nonzero(xprime.get(k, l), &mut nz) else {
                    continue;
                };
                for a in 0..=p {
                    mean[first + a] += nz[a];
                    for c in 0..=p {
                        a2[(first + a, first + c)] += nz[a] * nz[c];
                    }
                }
                if let Some(pf) = basis.eval_nonzero(xprime.get(k, l - 1), &mut prev) {
                    for a in 0..=p {
                        for c in 0..=p {
                            a3[(pf + a, first + c)] += prev[a] * nz[c];
                        }
                    }
                }
            }
            mean *= inv;
            a2 *= inv;
            a3 = (&a3 + a3.transpose()) * (0.5 * inv);
            (mean, a2, a3)
        })
        .collect();
    let mut mean_phi = Vec::with_capacity(steps);
    let mut a2 = Vec::with_capacity(steps);
    let mut a3 = Vec::with_capacity(steps);
    for (v, b, c) in per_time {
        mean_phi.push(v);
        a2.push(b);
        a3.push(c);
    }
    let lphi = match model {
        Some(spec) => Some(generator_means(xprime, basis, spec)?),
        None => None,
    };
    Ok(StateMoments {
        degree: p,
        dim: n,
        grid: xprime.grid,
        n_paths: m,
        a1bar: average_outer(&mean_phi),
        mean_phi,
        a2,
        a3,
        lphi,
    })
}

/// `E[L phi_i(X_{t_{l-1}})] dt` with `L phi = a phi' + b^2 phi'' / 2`.
fn generator_means(
    x: &TrajectoryEnsemble,
    basis: &BSplineBasis,
    spec: &StateModelSpec,
) -> Result<Vec<DVector<f64>>> {
    let p = basis.degree();
    let dt = x.grid.dt;
    let m = x.n_paths();
    (1..=x.steps())
        .into_par_iter()
        .map(|l| {
            let mut v = DVector::zeros(basis.dim());
            let mut ders = [[0.0; MAX_DEGREE + 1]; 3];
            for k in 0..m {
                let s = x.get(k, l - 1);
                if let Some(first) = basis.eval_nonzero_derivatives(s, 2, &mut ders)? {
                    let a = spec.drift(s);
                    let b = spec.diffusion(s);
                    for j in 0..=p {
                        v[first + j] += a * ders[1][j] + 0.5 * b * b * ders[2][j];
                    }
                }
            }
            Ok(v * (dt / m as f64))
        })
        .collect()
}

impl ObservationStats {
    pub fn from_ensemble(y: &TrajectoryEnsemble) -> Result<Self> {
        let m = y.n_paths();
        if m == 0 {
            return validation("observation ensemble is empty");
        }
        let width = y.grid.len();
        let mut mean = vec![0.0; width];
        let mut second = vec![0.0; width];
        let mut lag = vec![0.0; width - 1];
        for path in y.paths() {
            for l in 0..width {
                mean[l] += path[l];
                second[l] += path[l] * path[l];
            }
            for l in 1..width {
                lag[l - 1] += path[l - 1] * path[l];
            }
        }
        let inv = 1.0 / m as f64;
        for v in mean.iter_mut().chain(second.iter_mut()).chain(lag.iter_mut()) {
            *v *= inv;
        }
        Ok(ObservationStats { grid: y.grid, n_paths: m, mean, second, lag })
    }

    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    /// `(1/(LM)) sum_{l>=1} sum_m Y^2`
    pub fn energy(&self) -> f64 {
        self.second[1..].iter().sum::<f64>() / self.steps() as f64
    }
}

/// `w_k = L sqrt(M) / ||m_k||` over `l = 0..L-1`; `w4` uses the mean increments.
pub fn compute_weights(stats: &ObservationStats) -> Weights {
    let steps = stats.steps();
    let scale = steps as f64 * (stats.n_paths as f64).sqrt();
    let w = |norm: f64, name: &str| {
        if norm > 0.0 && norm.is_finite() {
            scale / norm
        } else {
            log::warn!("moment {name} of the observations vanishes; using unit normalisation");
            scale
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dy: Vec<f64> = (1..=steps).map(|l| stats.mean[l] - stats.mean[l - 1]).collect();
    Weights {
        w1: w(norm(&stats.mean[..steps]), "m1"),
        w2: w(norm(&stats.second[..steps]), "m2"),
        w3: w(norm(&stats.lag), "m3"),
        w4: w(norm(&dy), "m4"),
    }
}

impl MomentSystem {
    /// Combine state moments with observation statistics.
    pub fn assemble(state: &StateMoments, stats: &ObservationStats, noise: &NoiseModel) -> Result<Self> {
        check_grids(&state.grid, &stats.grid)?;
        noise.validate()?;
        let steps = state.grid.steps;
        let mut b1bar = DVector::zeros(state.dim);
        for l in 1..=steps {
            b1bar.axpy(stats.mean[l], &state.mean_phi[l - 1], 1.0);
        }
        b1bar /= steps as f64;
        let b_tilde1 = stats.mean[1..].iter().map(|v| v * v).sum::<f64>() / steps as f64;
        let grid = state.grid;
        let noise_c_diag = (1..=steps).map(|l| noise.covariance(grid.time(l), grid.time(l))).collect();
        let noise_c_off = (1..=steps).map(|l| noise.covariance(grid.time(l - 1), grid.time(l))).collect();
        let e4 = state.lphi.as_ref().map(|lphi| E4Terms {
            lphi: lphi.clone(),
            dy: (1..=steps).map(|l| stats.mean[l] - stats.mean[l - 1]).collect(),
        });
        Ok(MomentSystem {
            dim: state.dim,
            steps,
            a1bar: state.a1bar.clone(),
            a2: state.a2.clone(),
            a3: state.a3.clone(),
            b1bar,
            b_tilde1,
            b2: stats.second[1..].to_vec(),
            b3: stats.lag.clone(),
            weights: compute_weights(stats),
            noise_c_diag,
            noise_c_off,
            e4,
        })
    }

    pub fn with_weights(mut self, weights: Weights) -> Self {
        self.weights = weights;
        self
    }

    /// Drop the noise correction terms.
    pub fn without_noise_correction(mut self) -> Self {
        self.noise_c_diag.iter_mut().for_each(|v| *v = 0.0);
        self.noise_c_off.iter_mut().for_each(|v| *v = 0.0);
        self
    }
}

/// Cache key for state moments.
pub fn cache_key(model: &str, degree: usize, dim: usize, m_prime: usize, seed: u64) -> String {
    format!("{model}-p{degree}-n{dim}-m{m_prime}-s{seed}")
}

impl StateMoments {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
