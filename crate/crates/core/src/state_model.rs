//! Scalar SDE state models `dX = a(X) dt + b(X) dB` and their Euler–Maruyama
//! ensembles.

use crate::error::{validation, Error, Result};
use crate::expr::Expr;
use crate::rng::{substream, Stream};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// States beyond this magnitude abort the simulation.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// A real function of the state used as drift or diffusion coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficient {
    /// Polynomial with ascending coefficients `c0 + c1 x + c2 x^2 + ...`.
    Polynomial(Vec<f64>),
    Expr(Expr),
}

impl Coefficient {
    pub fn constant(v: f64) -> Self {
        Coefficient::Polynomial(vec![v])
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Coefficient::Polynomial(c) => c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci),
            Coefficient::Expr(e) => e.eval1(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateModelSpec {
    pub name: String,
    pub drift: Coefficient,
    pub diffusion: Coefficient,
}

impl StateModelSpec {
    pub fn new(name: impl Into<String>, drift: Coefficient, diffusion: Coefficient) -> Self {
        StateModelSpec { name: name.into(), drift, diffusion }
    }

    /// Standard Brownian motion: `a = 0`, `b = 1`.
    pub fn brownian() -> Self {
        Self::new("brownian", Coefficient::constant(0.0), Coefficient::constant(1.0))
    }

    /// Ornstein–Uhlenbeck `dX = -theta X dt + dB`.
    pub fn ornstein_uhlenbeck(theta: f64) -> Self {
        Self::new("ou", Coefficient::Polynomial(vec![0.0, -theta]), Coefficient::constant(1.0))
    }

    /// Double-well potential: `dX = (X - X^3) dt + dB`.
    pub fn double_well() -> Self {
        Self::new("double-well", Coefficient::Polynomial(vec![0.0, 1.0, 0.0, -1.0]), Coefficient::constant(1.0))
    }

    pub fn drift(&self, x: f64) -> f64 {
        self.drift.eval(x)
    }

    pub fn diffusion(&self, x: f64) -> f64 {
        self.diffusion.eval(x)
    }

    /// Check `b(x) > 0` at every probe point (uniform ellipticity on the probed set).
    pub fn check_elliptic(&self, probes: &[f64]) -> Result<()> {
        for &x in probes {
            let b = self.diffusion(x);
            if !(b > 0.0) {
                return validation(format!("diffusion of model {:?} is {b} at x = {x}; must be positive", self.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialDistribution {
    PointMass(f64),
    Uniform { lo: f64, hi: f64 },
    GaussianMixture(Vec<MixtureComponent>),
}

impl InitialDistribution {
    /// Equal-weight mixture of N(-0.5, 0.2) and N(1, 0.5) (variances), used with
    /// the double-well model.
    pub fn double_well_default() -> Self {
        InitialDistribution::GaussianMixture(vec![
            MixtureComponent { weight: 0.5, mean: -0.5, variance: 0.2 },
            MixtureComponent { weight: 0.5, mean: 1.0, variance: 0.5 },
        ])
    }

    pub fn gaussian(mean: f64, variance: f64) -> Self {
        InitialDistribution::GaussianMixture(vec![MixtureComponent { weight: 1.0, mean, variance }])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialDistribution::PointMass(x) if !x.is_finite() => validation("point mass must be finite"),
            InitialDistribution::Uniform { lo, hi } if !(lo < hi) || !lo.is_finite() || !hi.is_finite() => {
                validation(format!("uniform initial law needs lo < hi, got [{lo}, {hi}]"))
            }
            InitialDistribution::GaussianMixture(comps) => {
                if comps.is_empty() {
                    return validation("gaussian mixture has no components");
                }
                let mut total = 0.0;
                for c in comps {
                    if !(c.weight > 0.0) {
                        return validation(format!("mixture weight must be positive, got {}", c.weight));
                    }
                    if !(c.variance > 0.0) {
                        return validation(format!("mixture variance must be positive, got {}", c.variance));
                    }
                    if !c.mean.is_finite() {
                        return validation("mixture mean must be finite");
                    }
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return validation(format!("mixture weights sum to {total}, expected 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            InitialDistribution::PointMass(x) => *x,
            InitialDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
            InitialDistribution::GaussianMixture(comps) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = comps.last().unwrap();
                for c in comps {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                Normal::new(chosen.mean, chosen.variance.sqrt()).unwrap().sample(rng)
            }
        }
    }
}

/// Uniform observation times `t_l = l * dt`, `l = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return validation(format!("time step must be positive, got {dt}"));
        }
        if steps == 0 {
            return validation("time grid needs at least one step");
        }
        Ok(TimeGrid { dt, steps })
    }

    pub fn time(&self, l: usize) -> f64 {
        l as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|l| self.time(l)).collect()
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.steps)
    }

    /// Number of stored time points, `L + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `M` sample paths on a shared time grid, stored path-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub grid: TimeGrid,
    pub seed: u64,
    n_paths: usize,
    values: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn from_values(grid: TimeGrid, seed: u64, values: Vec<f64>) -> Result<Self> {
        let width = grid.len();
        if values.is_empty() || values.len() % width != 0 {
            return validation(format!("{} values do not form paths of length {width}", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return validation(format!("ensemble contains non-finite value {v}"));
        }
        Ok(TrajectoryEnsemble { grid, seed, n_paths: values.len() / width, values })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of steps `L`.
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn path(&self, m: usize) -> &[f64] {
        let w = self.grid.len();
        &self.values[m * w..(m + 1) * w]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.grid.len())
    }

    pub fn par_paths(&self) -> rayon::slice::ChunksExact<'_, f64> {
        self.values.par_chunks_exact(self.grid.len())
    }

    pub fn get(&self, m: usize, l: usize) -> f64 {
        self.values[m * self.grid.len() + l]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All samples at time index `l`.
    pub fn time_slice(&self, l: usize) -> Vec<f64> {
        self.paths().map(|p| p[l]).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Paths `range` as a new ensemble (shares grid and seed).
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.n_paths {
            return validation(format!("invalid path range {range:?} for {} paths", self.n_paths));
        }
        let w = self.grid.len();
        Ok(TrajectoryEnsemble {
            grid: self.grid,
            seed: self.seed,
            n_paths: range.len(),
            values: self.values[range.start * w..range.end * w].to_vec(),
        })
    }

    /// Apply `f` elementwise, keeping the layout.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> TrajectoryEnsemble {
        let values = self.values.par_iter().map(|&v| f(v)).collect();
        TrajectoryEnsemble { grid: self.grid, seed: self.seed, n_paths: self.n_paths, values }
    }
}

/// Simulate `n_paths` Euler–Maruyama trajectories. Path `m` draws from its own
/// stream, so results are identical for any worker count and the first paths
/// are unchanged when `n_paths` grows.
pub fn simulate_ensemble(
    spec: &StateModelSpec,
    init: &InitialDistribution,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if n_paths == 0 {
        return validation("ensemble size must be at least 1");
    }
    init.validate()?;
    TimeGrid::new(grid.dt, grid.steps)?;
    let width = grid.len();
    let sqrt_dt = grid.dt.sqrt();
    let mut values = vec![0.0; n_paths * width];

    let failure = values
        .par_chunks_mut(width)
        .enumerate()
        .filter_map(|(m, path)| {
            let mut rng = substream(seed, Stream::State, m as u64);
            let mut x = init.sample(&mut rng);
            path[0] = x;
            for l in 1..width {
                let b = spec.diffusion(x);
                let xi: f64 = StandardNormal.sample(&mut rng);
                x += spec.drift(x) * grid.dt + b * sqrt_dt * xi;
                if !x.is_finite() || x.abs() > DIVERGENCE_BOUND || b < 0.0 {
                    return Some((m, l, x));
                }
                path[l] = x;
            }
            None
        })
        .min_by_key(|&(m, _, _)| m);

    if let Some((path, step, state)) = failure {
        return Err(Error::SimulationDiverged { step, path, state });
    }
    Ok(TrajectoryEnsemble { grid, seed, n_paths, values })
}
