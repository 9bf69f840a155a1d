//! Wasserstein-2 scoring of predicted observation marginals and the sweep over
//! degrees and dimensions.

use crate::bspline::{BSplineBasis, BSplineSpace, SplineFunction};
use crate::cedr::{dimension_ranges, CedrConfig, CedrReport};
use crate::density::{estimate_density, DensityGrid, DEFAULT_GRID_SIZE};
use crate::error::{validation, Result};
use crate::loss::LossEvaluation;
use crate::moments::{assemble_state_moments, MomentSystem, ObservationStats, Weights};
use crate::observation::{observe_ensemble, NoiseModel, ObservationFunction};
use crate::optimizer::{minimize, MinimizeResult, OptimizerConfig};
use crate::rng::derive_seed;
use crate::state_model::{simulate_ensemble, InitialDistribution, StateModelSpec, TrajectoryEnsemble};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_QUANTILES: usize = 1000;

/// Seed tags for the ensembles derived from a run seed.
pub mod tags {
    pub const STATE_MOMENTS: u64 = 1;
    pub const TEST_STATES: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const TEST_NOISE: u64 = 4;
    pub const OPTIMIZER: u64 = 5;
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    radsort::sort(&mut v);
    v
}

/// Exact `W2` between two empirical laws (integral of the squared difference
/// of their quantile step functions).
pub fn wasserstein2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return validation("Wasserstein distance needs nonempty samples");
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len() as u128, sb.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut t: u128 = 0;
    let mut acc = 0.0;
    while i < sa.len() && j < sb.len() {
        let ea = (i as u128 + 1) * nb;
        let eb = (j as u128 + 1) * na;
        let end = ea.min(eb);
        let d = sa[i] - sb[j];
        acc += d * d * (end - t) as f64;
        t = end;
        if ea == end {
            i += 1;
        }
        if eb == end {
            j += 1;
        }
    }
    Ok((acc / (na * nb) as f64).sqrt())
}

/// Empirical quantiles of sorted data at `q_j = (j + 1/2) / Q`.
pub fn midpoint_quantiles(sorted: &[f64], q: usize) -> Vec<f64> {
    let n = sorted.len();
    (0..q)
        .map(|j| {
            let r = (j as f64 + 0.5) / q as f64;
            let k = ((r * n as f64).ceil() as usize).clamp(1, n) - 1;
            sorted[k]
        })
        .collect()
}

/// `W2` approximated on a uniform quantile grid of size `q`.
pub fn wasserstein2_grid(a: &[f64], b: &[f64], q: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || q == 0 {
        return validation("Wasserstein distance needs nonempty samples and quantile grid");
    }
    let qa = midpoint_quantiles(&sorted(a), q);
    let qb = midpoint_quantiles(&sorted(b), q);
    Ok(quantile_distance(&qa, &qb))
}

fn quantile_distance(qa: &[f64], qb: &[f64]) -> f64 {
    (qa.iter().zip(qb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / qa.len() as f64).sqrt()
}

/// Quantiles of every time slice `l = 1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub q: usize,
    pub per_time: Vec<Vec<f64>>,
}

impl QuantileTable {
    pub fn from_ensemble(y: &TrajectoryEnsemble, q: usize) -> Result<Self> {
        if y.n_paths() == 0 || q == 0 {
            return validation("quantile table needs data and a nonempty grid");
        }
        let per_time = (1..=y.steps())
            .into_par_iter()
            .map(|l| midpoint_quantiles(&sorted(&y.time_slice(l)), q))
            .collect();
        Ok(QuantileTable { q, per_time })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Score {
    pub per_time: Vec<f64>,
    pub score: f64,
}

impl W2Score {
    pub fn from_tables(data: &QuantileTable, prediction: &QuantileTable) -> Result<Self> {
        if data.per_time.len() != prediction.per_time.len() || data.q != prediction.q {
            return validation("quantile tables are not aligned");
        }
        let per_time: Vec<f64> =
            data.per_time.iter().zip(&prediction.per_time).map(|(a, b)| quantile_distance(a, b)).collect();
        let score = (per_time.iter().map(|w| w * w).sum::<f64>() / per_time.len() as f64).sqrt();
        Ok(W2Score { per_time, score })
    }
}

/// Time-averaged `W2` between the data and `f_hat` applied to a state
/// ensemble, with noise added to the predictions.
pub fn w2_time_average(
    data: &QuantileTable,
    f_hat: &ObservationFunction,
    states: &TrajectoryEnsemble,
    noise: &NoiseModel,
    noise_seed: u64,
) -> Result<W2Score> {
    if states.steps() != data.per_time.len() {
        return validation("prediction ensemble and data have different time grids");
    }
    let predicted = observe_ensemble(states, f_hat, noise, noise_seed)?;
    W2Score::from_tables(data, &QuantileTable::from_ensemble(&predicted, data.q)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub degrees: Vec<usize>,
    pub m_prime: usize,
    /// Size of the fresh test ensemble; defaults to the number of data paths.
    pub m_test: Option<usize>,
    pub density_grid: usize,
    pub quantiles: usize,
    pub cedr: CedrConfig,
    /// Dimensions to try instead of the CEDR range.
    pub dims: Option<Vec<usize>>,
    /// Upper limit on swept dimensions regardless of the CEDR range.
    pub n_max_sweep: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub weights: Option<Weights>,
    pub noise_correction: bool,
    pub generator_term: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            degrees: vec![0, 1, 2, 3],
            m_prime: 100_000,
            m_test: None,
            density_grid: DEFAULT_GRID_SIZE,
            quantiles: DEFAULT_QUANTILES,
            cedr: CedrConfig::default(),
            dims: None,
            n_max_sweep: None,
            optimizer: OptimizerConfig::default(),
            weights: None,
            noise_correction: true,
            generator_term: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub degree: usize,
    pub n: usize,
    pub loss: f64,
    pub w2_train: f64,
    pub w2_test: f64,
    pub runtime: f64,
    pub converged: bool,
    pub start_label: String,
    pub coefficients: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub degree: usize,
    pub n: usize,
    pub space: BSplineSpace,
    pub coefficients: DVector<f64>,
    pub loss: LossEvaluation,
    pub w2_train: W2Score,
    pub w2_test: W2Score,
    pub optimization: MinimizeResult,
}

impl EstimatorResult {
    pub fn function(&self) -> SplineFunction {
        SplineFunction { basis: self.space.basis.clone(), coefficients: self.coefficients.clone() }
    }

    pub fn observation(&self) -> ObservationFunction {
        ObservationFunction::Spline(self.function())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub cedr: Vec<CedrReport>,
    pub selected: (usize, usize),
    pub estimator: EstimatorResult,
    pub density: DensityGrid,
}

impl SweepResult {
    /// Sweep table without wall-clock columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("degree,n,loss,w2_train,w2_test,converged,start,error\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{},{},{}\n",
                c.degree,
                c.n,
                c.loss,
                c.w2_train,
                c.w2_test,
                c.converged,
                c.start_label,
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("degree,n,runtime_seconds\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{:.3}\n", c.degree, c.n, c.runtime));
        }
        s
    }
}

/// Shared read-only inputs of every sweep cell.
pub struct SweepContext<'a> {
    pub xprime: &'a TrajectoryEnsemble,
    pub xtest: &'a TrajectoryEnsemble,
    pub y: &'a TrajectoryEnsemble,
    pub stats: ObservationStats,
    pub data_quantiles: QuantileTable,
    pub model: &'a StateModelSpec,
    pub noise: &'a NoiseModel,
    pub support: (f64, f64),
    pub cfg: &'a SweepConfig,
}

impl<'a> SweepContext<'a> {
    pub fn new(
        xprime: &'a TrajectoryEnsemble,
        xtest: &'a TrajectoryEnsemble,
        y: &'a TrajectoryEnsemble,
        model: &'a StateModelSpec,
        noise: &'a NoiseModel,
        cfg: &'a SweepConfig,
    ) -> Result<Self> {
        Ok(SweepContext {
            xprime,
            xtest,
            y,
            stats: ObservationStats::from_ensemble(y)?,
            data_quantiles: QuantileTable::from_ensemble(y, cfg.quantiles)?,
            model,
            noise,
            support: xprime.min_max(),
            cfg,
        })
    }

    /// Hypothesis space of the given degree and dimension.
    pub fn space(&self, degree: usize, n: usize) -> Result<BSplineSpace> {
        let basis = BSplineBasis::new(degree, n, self.support.0, self.support.1)?;
        let (y_min, y_max) = self.y.min_max();
        BSplineSpace::new(basis, y_min, y_max)
    }

    pub fn system(&self, space: &BSplineSpace) -> Result<MomentSystem> {
        let with_generator = self.cfg.generator_term && space.degree() >= 2;
        let state = assemble_state_moments(self.xprime, &space.basis, with_generator.then_some(self.model))?;
        let mut sys = MomentSystem::assemble(&state, &self.stats, self.noise)?;
        if !self.cfg.noise_correction {
            sys = sys.without_noise_correction();
        }
        if let Some(w) = self.cfg.weights {
            sys = sys.with_weights(w);
        }
        Ok(sys)
    }

    /// Fit one hypothesis space and score it.
    pub fn fit(&self, degree: usize, n: usize) -> Result<EstimatorResult> {
        let space = self.space(degree, n)?;
        let sys = self.system(&space)?;
        let opt_cfg = OptimizerConfig { seed: derive_seed(self.cfg.seed, tags::OPTIMIZER), ..self.cfg.optimizer.clone() };
        let optimization = minimize(&sys, &space, &opt_cfg)?;
        let f = ObservationFunction::Spline(space.function(optimization.c_hat.clone())?);
        let w2_train =
            w2_time_average(&self.data_quantiles, &f, self.xprime, self.noise, derive_seed(self.cfg.seed, tags::TRAIN_NOISE))?;
        let w2_test =
            w2_time_average(&self.data_quantiles, &f, self.xtest, self.noise, derive_seed(self.cfg.seed, tags::TEST_NOISE))?;
        Ok(EstimatorResult {
            degree,
            n,
            coefficients: optimization.c_hat.clone(),
            loss: optimization.loss.clone(),
            space,
            w2_train,
            w2_test,
            optimization,
        })
    }
}

/// Fresh state ensembles for moments and testing, derived from the run seed.
pub fn state_ensembles(
    model: &StateModelSpec,
    init: &InitialDistribution,
    y: &TrajectoryEnsemble,
    cfg: &SweepConfig,
) -> Result<(TrajectoryEnsemble, TrajectoryEnsemble)> {
    let xprime = simulate_ensemble(model, init, y.grid, cfg.m_prime, derive_seed(cfg.seed, tags::STATE_MOMENTS))?;
    let m_test = cfg.m_test.unwrap_or(y.n_paths());
    let xtest = simulate_ensemble(model, init, y.grid, m_test, derive_seed(cfg.seed, tags::TEST_STATES))?;
    Ok((xprime, xtest))
}

/// Density, dimension ranges, then fit and score every (degree, n); the cell
/// with the smallest test score wins.
pub fn run_algorithm1(
    model: &StateModelSpec,
    init: &InitialDistribution,
    y: &TrajectoryEnsemble,
    noise: &NoiseModel,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if cfg.degrees.is_empty() {
        return validation("no degrees to sweep");
    }
    let (xprime, xtest) = state_ensembles(model, init, y, cfg)?;
    let density = estimate_density(&xprime, cfg.density_grid)?;
    let cedr = dimension_ranges(&xprime, y, &cfg.degrees, &cfg.cedr)?;
    let ctx = SweepContext::new(&xprime, &xtest, y, model, noise, cfg)?;
    let mut jobs = Vec::new();
    for report in &cedr {
        let p = report.degree;
        let dims: Vec<usize> = match &cfg.dims {
            Some(d) => d.iter().copied().filter(|&n| n > p).collect(),
            None => {
                let top = cfg.n_max_sweep.map_or(report.n_selected, |m| report.n_selected.min(m));
                (p + 1..=top).collect()
            }
        };
        jobs.extend(dims.into_iter().map(|n| (p, n)));
    }
    if jobs.is_empty() {
        return validation("the sweep has no admissible (degree, dimension) pairs");
    }
    let fits: Vec<(SweepCell, Option<EstimatorResult>)> = jobs
        .par_iter()
        .map(|&(degree, n)| {
            let start = Instant::now();
            match ctx.fit(degree, n) {
                Ok(est) => (
                    SweepCell {
                        degree,
                        n,
                        loss: est.loss.total,
                        w2_train: est.w2_train.score,
                        w2_test: est.w2_test.score,
                        runtime: start.elapsed().as_secs_f64(),
                        converged: est.optimization.converged,
                        start_label: est.optimization.start_label.clone(),
                        coefficients: est.coefficients.iter().copied().collect(),
                        error: None,
                    },
                    Some(est),
                ),
                Err(e) => {
                    log::warn!("sweep cell degree {degree}, n {n} failed: {e}");
                    (
                        SweepCell {
                            degree,
                            n,
                            loss: f64::NAN,
                            w2_train: f64::NAN,
                            w2_test: f64::NAN,
                            runtime: start.elapsed().as_secs_f64(),
                            converged: false,
                            start_label: String::new(),
                            coefficients: vec![],
                            error: Some(e.to_string()),
                        },
                        None,
                    )
                }
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (k, (cell, est)) in fits.iter().enumerate() {
        if est.is_some() && best.map_or(true, |b| cell.w2_test < fits[b].0.w2_test) {
            best = Some(k);
        }
    }
    let best = match best {
        Some(b) => b,
        None => return Err(crate::error::Error::Numerical("every sweep cell failed".into())),
    };
    let mut cells = Vec::with_capacity(fits.len());
    let mut estimator = None;
    for (k, (cell, est)) in fits.into_iter().enumerate() {
        if k == best {
            estimator = est;
        }
        cells.push(cell);
    }
    let estimator = estimator.expect("best cell has an estimator");
    Ok(SweepResult { selected: (estimator.degree, estimator.n), cells, cedr, estimator, density })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_w2_basics() {
        let a = [0.3, -1.0, 2.5, 0.7];
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        assert!((wasserstein2(&a, &shifted).unwrap() - 0.25).abs() < 1e-12);
        assert!(wasserstein2(&[], &a).is_err());
    }

    #[test]
    fn three_point_laws_match_best_matching() {
        let a: [f64; 3] = [0.1, 2.0, -0.5];
        let b = [1.0, 0.4, 3.0];
        // brute force over all matchings
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| (a[i] - b[p[i]]).powi(2)).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert!((wasserstein2(&a, &b).unwrap() - best.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes() {
        // law of {0, 1} vs {0, 0, 1, 1} coincide
        assert!(wasserstein2(&[0.0, 1.0], &[0.0, 1.0, 1.0, 0.0]).unwrap() < 1e-15);
        // {0} vs {0, 1}: half the mass moves by 1
        assert!((wasserstein2(&[0.0], &[0.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_version_reduces_to_sorted_distance() {
        let a: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.01).collect();
        let b: Vec<f64> = (0..1000).map(|i| ((i * 53) % 97) as f64 * 0.013).collect();
        let g = wasserstein2_grid(&a, &b, 1000).unwrap();
        assert!((g - wasserstein2(&a, &b).unwrap()).abs() < 1e-12);
    }
}
