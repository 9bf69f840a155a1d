//! Configuration-driven runs: synthetic data, the end-to-end estimator,
//! convergence studies, kernel analysis and the non-identifiability cases.

use crate::cedr::CedrConfig;
use crate::density::{estimate_density, DEFAULT_GRID_SIZE};
use crate::error::{validation, Error, Result};
use crate::expr::Expr;
use crate::loss::function_loss;
use crate::model_selection::{
    run_algorithm1, state_ensembles, tags, EstimatorResult, SweepConfig, SweepContext, SweepResult,
    DEFAULT_QUANTILES,
};
use crate::moments::{ObservationStats, Weights};
use crate::observation::{add_noise, NoiseModel, ObservationFunction};
use crate::optimizer::OptimizerConfig;
use crate::rkhs::{
    kernel_eigen, kernel_grids_analytic, kernel_grids_empirical, AnalyticDensityFamily, KernelGrid, KernelKind,
    KernelSpectrum, TimeRule, DEFAULT_TIME_EPSILON, DEFAULT_TIME_NODES,
};
use crate::rng::derive_seed;
use crate::state_model::{
    simulate_ensemble, Coefficient, InitialDistribution, MixtureComponent, StateModelSpec, TimeGrid, TrajectoryEnsemble,
};
use serde::{Deserialize, Serialize};

/// Seed tags for the data-generating side (the sweep uses `tags`).
pub mod data_tags {
    pub const STATES: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const REPEAT_BASE: u64 = 1_000;
    pub const LOSS_ENSEMBLE_BASE: u64 = 2_000;
    pub const SYMMETRIC_DEMO: u64 = 3_001;
    pub const STATIONARY_DEMO: u64 = 3_002;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `double-well`, `brownian`, `ou`; ignored when `drift` is given.
    pub name: String,
    pub theta: f64,
    /// Expression in `x`.
    pub drift: Option<String>,
    /// Expression in `x`; defaults to `1`.
    pub diffusion: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { name: "double-well".into(), theta: 1.0, drift: None, diffusion: None }
    }
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<StateModelSpec> {
        if let Some(drift) = &self.drift {
            let a = in_field("model.drift", Expr::parse(drift, &["x"]))?;
            let b = match &self.diffusion {
                Some(src) => Coefficient::Expr(in_field("model.diffusion", Expr::parse(src, &["x"]))?),
                None => Coefficient::constant(1.0),
            };
            return Ok(StateModelSpec::new("custom", Coefficient::Expr(a), b));
        }
        if self.diffusion.is_some() {
            return validation("model.diffusion needs model.drift");
        }
        match self.name.as_str() {
            "double-well" => Ok(StateModelSpec::double_well()),
            "brownian" => Ok(StateModelSpec::brownian()),
            "ou" => {
                if !(self.theta > 0.0) {
                    return validation(format!("model.theta must be positive, got {}", self.theta));
                }
                Ok(StateModelSpec::ornstein_uhlenbeck(self.theta))
            }
            other => validation(format!("unknown model name {other:?} (double-well, brownian, ou)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialConfig {
    PointMass { x0: f64 },
    Uniform { lo: f64, hi: f64 },
    GaussianMixture { components: Vec<MixtureComponent> },
    /// Equal mixture of N(-0.5, 0.2) and N(1, 0.5).
    DoubleWell,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::DoubleWell
    }
}

impl InitialConfig {
    pub fn resolve(&self) -> Result<InitialDistribution> {
        let d = match self {
            InitialConfig::PointMass { x0 } => InitialDistribution::PointMass(*x0),
            InitialConfig::Uniform { lo, hi } => InitialDistribution::Uniform { lo: *lo, hi: *hi },
            InitialConfig::GaussianMixture { components } => InitialDistribution::GaussianMixture(components.clone()),
            InitialConfig::DoubleWell => InitialDistribution::double_well_default(),
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseConfig {
    None,
    IidGaussian { variance: f64 },
    /// `C(s, t)` as an expression in `s` and `t`.
    StationaryCovariance { covariance: String },
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::None
    }
}

impl NoiseConfig {
    pub fn resolve(&self) -> Result<NoiseModel> {
        let n = match self {
            NoiseConfig::None => NoiseModel::None,
            NoiseConfig::IidGaussian { variance } => NoiseModel::IidGaussian { variance: *variance },
            NoiseConfig::StationaryCovariance { covariance } => {
                NoiseModel::StationaryCovariance(in_field("noise.covariance", Expr::parse(covariance, &["s", "t"]))?)
            }
        };
        n.validate()?;
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { dt: 0.01, steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub degrees: Vec<usize>,
    /// Explicit dimensions instead of the CEDR range.
    pub dims: Option<Vec<usize>>,
    pub n_max_sweep: Option<usize>,
    pub cedr_n_max: usize,
    pub quantiles: usize,
    pub density_grid: usize,
    pub noise_correction: bool,
    pub generator_term: bool,
    pub weights: Option<Weights>,
    pub random_starts: usize,
    /// Size of the fresh ensemble used for test scores; defaults to `paths`.
    pub test_paths: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        SweepSection {
            degrees: vec![0, 1, 2, 3],
            dims: None,
            n_max_sweep: None,
            cedr_n_max: CedrConfig::default().n_max,
            quantiles: DEFAULT_QUANTILES,
            density_grid: DEFAULT_GRID_SIZE,
            noise_correction: true,
            generator_term: false,
            weights: None,
            random_starts: opt.random_starts,
            test_paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Defaults to `floor(10^(3.5 + j/16))`, `j = 0..4`.
    pub sizes: Option<Vec<usize>>,
    pub repeats: usize,
    /// Fixed hypothesis space; selected by one sweep at the largest size when absent.
    pub degree: Option<usize>,
    pub dim: Option<usize>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { sizes: None, repeats: 20, degree: None, dim: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelFamilyConfig {
    Brownian { x0: f64 },
    Ou { theta: f64, x0: f64 },
    StationaryOu { theta: f64 },
    /// Per-time histograms of a simulated ensemble of the configured model.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub source: KernelFamilyConfig,
    /// Time-average over `t_1..t_L` instead of the continuous horizon.
    pub discrete: bool,
    pub time_nodes: usize,
    pub epsilon: f64,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub eigenpairs: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            source: KernelFamilyConfig::Brownian { x0: 0.0 },
            discrete: false,
            time_nodes: DEFAULT_TIME_NODES,
            epsilon: DEFAULT_TIME_EPSILON,
            lo: -3.0,
            hi: 3.0,
            points: 100,
            eigenpairs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub initial: InitialConfig,
    pub time: TimeConfig,
    /// Number of observed trajectories `M`.
    pub paths: usize,
    /// Number of state trajectories `M'` for the moments; defaults to `paths`.
    pub state_paths: Option<usize>,
    /// Builtin name (`sine`, `sine-cosine`, `arch`) or an expression in `x`.
    pub observation: String,
    pub noise: NoiseConfig,
    pub sweep: SweepSection,
    pub convergence: ConvergenceConfig,
    pub kernel: KernelConfig,
    pub seed: u64,
    /// Output directory; the command line takes precedence.
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            initial: InitialConfig::default(),
            time: TimeConfig::default(),
            paths: 100_000,
            state_paths: None,
            observation: "sine".into(),
            noise: NoiseConfig::default(),
            sweep: SweepSection::default(),
            convergence: ConvergenceConfig::default(),
            kernel: KernelConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

/// Prefix configuration errors with the offending key.
fn in_field<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        e => Error::Config { key: key.to_string(), message: e.to_string() },
    })
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: StateModelSpec,
    pub init: InitialDistribution,
    pub grid: TimeGrid,
    pub observation: ObservationFunction,
    pub noise: NoiseModel,
    pub paths: usize,
    /// Fixed `M'`; `None` ties it to `paths`.
    pub state_paths: Option<usize>,
    pub sweep: SweepConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Experiment> {
        let model = in_field("model", self.model.resolve())?;
        let init = in_field("initial", self.initial.resolve())?;
        let grid = in_field("time", TimeGrid::new(self.time.dt, self.time.steps))?;
        let observation = match ObservationFunction::builtin(&self.observation) {
            Some(f) => f,
            None => ObservationFunction::Expr(in_field("observation", Expr::parse(&self.observation, &["x"]))?),
        };
        let noise = in_field("noise", self.noise.resolve())?;
        if self.paths < 2 {
            return Err(Error::Config { key: "paths".into(), message: format!("must be at least 2, got {}", self.paths) });
        }
        let s = &self.sweep;
        if s.degrees.is_empty() {
            return Err(Error::Config { key: "sweep.degrees".into(), message: "empty".into() });
        }
        if s.quantiles == 0 || s.density_grid == 0 || s.cedr_n_max == 0 {
            return Err(Error::Config {
                key: "sweep".into(),
                message: "quantiles, density_grid and cedr_n_max must be positive".into(),
            });
        }
        let m_prime = self.state_paths.unwrap_or(self.paths);
        if m_prime < 2 {
            return Err(Error::Config { key: "state_paths".into(), message: format!("must be at least 2, got {m_prime}") });
        }
        let sweep = SweepConfig {
            degrees: s.degrees.clone(),
            m_prime,
            m_test: s.test_paths,
            density_grid: s.density_grid,
            quantiles: s.quantiles,
            cedr: CedrConfig { n_max: s.cedr_n_max, ..CedrConfig::default() },
            dims: s.dims.clone(),
            n_max_sweep: s.n_max_sweep,
            optimizer: OptimizerConfig { random_starts: s.random_starts, ..OptimizerConfig::default() },
            weights: s.weights,
            noise_correction: s.noise_correction,
            generator_term: s.generator_term,
            seed: self.seed,
        };
        in_field("sweep.random_starts", sweep.optimizer.validate())?;
        Ok(Experiment {
            model,
            init,
            grid,
            observation,
            noise,
            paths: self.paths,
            state_paths: self.state_paths,
            sweep,
            seed: self.seed,
        })
    }
}

/// Every seed a run consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub run: u64,
    pub data_states: u64,
    pub data_noise: u64,
    pub state_moments: u64,
    pub test_states: u64,
    pub train_noise: u64,
    pub test_noise: u64,
    pub optimizer: u64,
}

impl SeedRecord {
    pub fn new(seed: u64) -> Self {
        SeedRecord {
            run: seed,
            data_states: derive_seed(seed, data_tags::STATES),
            data_noise: derive_seed(seed, data_tags::NOISE),
            state_moments: derive_seed(seed, tags::STATE_MOMENTS),
            test_states: derive_seed(seed, tags::TEST_STATES),
            train_noise: derive_seed(seed, tags::TRAIN_NOISE),
            test_noise: derive_seed(seed, tags::TEST_NOISE),
            optimizer: derive_seed(seed, tags::OPTIMIZER),
        }
    }
}

/// Simulated observations and the signal-to-noise ratio (mean square of the
/// clean signal over the noise variance; `None` without noise).
pub struct SyntheticData {
    pub states: TrajectoryEnsemble,
    pub observations: TrajectoryEnsemble,
    pub snr: Option<f64>,
}

impl Experiment {
    pub fn seeds(&self) -> SeedRecord {
        SeedRecord::new(self.seed)
    }

    pub fn with_seed(&self, seed: u64) -> Experiment {
        let mut e = self.clone();
        e.seed = seed;
        e.sweep.seed = seed;
        e
    }

    /// Same experiment with `M` data paths (and `M' = M` unless fixed).
    pub fn with_paths(&self, paths: usize) -> Experiment {
        let mut e = self.clone();
        e.paths = paths;
        e.sweep.m_prime = self.state_paths.unwrap_or(paths);
        e
    }

    pub fn generate(&self) -> Result<SyntheticData> {
        let seeds = self.seeds();
        let states = simulate_ensemble(&self.model, &self.init, self.grid, self.paths, seeds.data_states)?;
        let clean = states.map(|x| self.observation.eval(x));
        let snr = if self.noise.is_none() {
            None
        } else {
            let count = (clean.n_paths() * clean.steps()) as f64;
            let power = clean.paths().flat_map(|p| p[1..].iter()).map(|v| v * v).sum::<f64>() / count;
            Some(power / self.noise.variance())
        };
        let observations = add_noise(&clean, &self.noise, seeds.data_noise)?;
        Ok(SyntheticData { states, observations, snr })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub sweep: SweepResult,
    /// Relative `L^2(rho)` error of the selected estimator.
    pub relative_error: f64,
    pub snr: Option<f64>,
    pub seeds: SeedRecord,
}

/// Relative `L^2(rho)` error of `f_hat` against `truth` on the sweep density.
pub fn relative_error(sweep: &SweepResult, truth: &ObservationFunction) -> Result<f64> {
    let f = sweep.estimator.function();
    let d = &sweep.density;
    d.relative_error(&d.sample(|x| f.eval(x)), &d.sample(|x| truth.eval(x)))
}

/// Generate data, run the estimator end to end and score it against the truth.
pub fn run_experiment(exp: &Experiment) -> Result<ExperimentOutcome> {
    let data = exp.generate()?;
    let SyntheticData { states, observations, snr } = data;
    drop(states);
    let sweep = run_algorithm1(&exp.model, &exp.init, &observations, &exp.noise, &exp.sweep)?;
    let relative_error = relative_error(&sweep, &exp.observation)?;
    Ok(ExperimentOutcome { sweep, relative_error, snr, seeds: exp.seeds() })
}

/// One hypothesis space fitted to fresh data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedFit {
    pub estimator: EstimatorResult,
    pub relative_error: f64,
}

/// Generate data and fit the given `(degree, n)` without a sweep.
pub fn fit_fixed(exp: &Experiment, degree: usize, n: usize) -> Result<FixedFit> {
    let data = exp.generate()?;
    let (xprime, xtest) = state_ensembles(&exp.model, &exp.init, &data.observations, &exp.sweep)?;
    let density = estimate_density(&xprime, exp.sweep.density_grid)?;
    let ctx = SweepContext::new(&xprime, &xtest, &data.observations, &exp.model, &exp.noise, &exp.sweep)?;
    let estimator = ctx.fit(degree, n)?;
    let f = estimator.function();
    let relative_error =
        density.relative_error(&density.sample(|x| f.eval(x)), &density.sample(|x| exp.observation.eval(x)))?;
    Ok(FixedFit { estimator, relative_error })
}

/// `floor(10^(3.5 + j delta))`, `j = 0..4`, `delta = 1/16`.
pub fn default_sizes() -> Vec<usize> {
    (0..5).map(|j| 10f64.powf(3.5 + j as f64 * 0.0625).floor() as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub sizes: Vec<usize>,
    pub degree: usize,
    pub n: usize,
    /// `errors[i][r]` for size `i`, repeat `r`.
    pub errors: Vec<Vec<f64>>,
    pub seeds: Vec<Vec<u64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Minus the least-squares slope of `log mean error` against `log M`.
    pub rate: f64,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,repeat,seed,degree,n,relative_error\n");
        for (i, m) in self.sizes.iter().enumerate() {
            for (r, e) in self.errors[i].iter().enumerate() {
                s.push_str(&format!("{m},{r},{},{},{},{e:e}\n", self.seeds[i][r], self.degree, self.n));
            }
        }
        s
    }
}

/// Slope of the least-squares line through `(x, y)`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return validation("a slope needs at least two matching points");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return validation("slope needs distinct abscissae");
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx)
}

/// Repeated estimation in a fixed hypothesis space over growing `M`.
///
/// Each (size, repeat) pair draws its own data and state ensembles. Without an
/// explicit `(degree, n)` the space is the one a full sweep selects at the
/// largest size.
pub fn run_convergence(
    exp: &Experiment,
    sizes: &[usize],
    repeats: usize,
    space: Option<(usize, usize)>,
) -> Result<ConvergenceStudy> {
    if sizes.len() < 2 || repeats == 0 {
        return validation("a convergence study needs two sizes and one repeat");
    }
    let (degree, n) = match space {
        Some(s) => s,
        None => {
            let probe = exp
                .with_seed(derive_seed(exp.seed, data_tags::REPEAT_BASE - 1))
                .with_paths(*sizes.iter().max().expect("nonempty"));
            run_experiment(&probe)?.sweep.selected
        }
    };
    let mut errors = Vec::with_capacity(sizes.len());
    let mut seeds = Vec::with_capacity(sizes.len());
    for (i, &m) in sizes.iter().enumerate() {
        let mut row = Vec::with_capacity(repeats);
        let mut seed_row = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let seed = derive_seed(exp.seed, data_tags::REPEAT_BASE + (i * repeats + r) as u64);
            let err = fit_fixed(&exp.with_seed(seed).with_paths(m), degree, n)?.relative_error;
            log::info!("convergence M = {m}, repeat {r}: error {err:.4}");
            row.push(err);
            seed_row.push(seed);
        }
        errors.push(row);
        seeds.push(seed_row);
    }
    let mean: Vec<f64> = errors.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let std = errors
        .iter()
        .zip(&mean)
        .map(|(r, m)| {
            if r.len() < 2 {
                0.0
            } else {
                (r.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt()
            }
        })
        .collect();
    let lx: Vec<f64> = sizes.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = mean.iter().map(|e| e.ln()).collect();
    let rate = -least_squares_slope(&lx, &ly)?;
    Ok(ConvergenceStudy { sizes: sizes.to_vec(), degree, n, errors, seeds, mean, std, rate })
}

/// Kernels and the `K1` spectrum for the configured source.
pub fn run_kernel(exp: &Experiment, cfg: &KernelConfig) -> Result<(KernelGrid, KernelSpectrum)> {
    if cfg.points < 2 || !(cfg.lo < cfg.hi) {
        return validation("kernel grid needs lo < hi and at least two points");
    }
    let kg = match &cfg.source {
        KernelFamilyConfig::Empirical => {
            let x = simulate_ensemble(&exp.model, &exp.init, exp.grid, exp.paths, exp.seeds().data_states)?;
            kernel_grids_empirical(&estimate_density(&x, cfg.points)?, exp.grid.dt)?
        }
        source => {
            let family = match *source {
                KernelFamilyConfig::Brownian { x0 } => AnalyticDensityFamily::Brownian { x0 },
                KernelFamilyConfig::Ou { theta, x0 } => AnalyticDensityFamily::OrnsteinUhlenbeck { theta, x0 },
                KernelFamilyConfig::StationaryOu { theta } => AnalyticDensityFamily::StationaryOu { theta },
                KernelFamilyConfig::Empirical => unreachable!(),
            };
            let rule = if cfg.discrete {
                TimeRule::discrete(exp.grid)
            } else {
                TimeRule::continuous(exp.grid.final_time(), cfg.time_nodes, cfg.epsilon)?
            };
            let h = (cfg.hi - cfg.lo) / cfg.points as f64;
            let points: Vec<f64> = (0..cfg.points).map(|i| cfg.lo + (i as f64 + 0.5) * h).collect();
            kernel_grids_analytic(&family, &rule, &points)?
        }
    };
    let spectrum = kernel_eigen(&kg, KernelKind::K1, cfg.eigenpairs)?;
    Ok((kg, spectrum))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryDemo {
    pub selected: (usize, usize),
    /// Relative errors of `f_hat` and `f_hat o R` against the truth.
    pub error_estimate: f64,
    pub error_reflected: f64,
    pub w2_test: f64,
    /// Loss of `f*` and `f* o R` on independent state ensembles.
    pub loss_truth: Vec<f64>,
    pub loss_reflected: Vec<f64>,
    /// Difference of the mean losses of `f*` and `f* o R`.
    pub loss_gap: f64,
    /// Sample standard deviation of `loss(f*)` across ensembles.
    pub mc_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDemo {
    pub selected: (usize, usize),
    pub error: f64,
    pub w2_test: f64,
    /// Largest numerical rank of `A1` over each degree's CEDR scan.
    pub rank_a1: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonIdentReport {
    pub symmetric: SymmetryDemo,
    pub stationary: StationaryDemo,
}

/// Brownian motion from `Unif(0, 1)` observed through `sin`, where `R(x) = 1 - x`
/// preserves the state law, and a stationary OU process observed through `sin`.
///
/// `template` supplies sizes, sweep settings and the seed; its model, initial
/// law, observation and noise are replaced.
pub fn demo_nonident(template: &Experiment, loss_ensembles: usize) -> Result<NonIdentReport> {
    if loss_ensembles < 2 {
        return validation("the loss comparison needs at least two state ensembles");
    }
    let reflect = |x: f64| 1.0 - x;

    let mut bm = template.with_seed(derive_seed(template.seed, data_tags::SYMMETRIC_DEMO));
    bm.model = StateModelSpec::brownian();
    bm.init = InitialDistribution::Uniform { lo: 0.0, hi: 1.0 };
    bm.observation = ObservationFunction::Sine;
    bm.noise = NoiseModel::None;
    let data = bm.generate()?;
    let sweep = run_algorithm1(&bm.model, &bm.init, &data.observations, &bm.noise, &bm.sweep)?;
    let f = sweep.estimator.function();
    let d = &sweep.density;
    let truth = d.sample(f64::sin);
    let error_estimate = d.relative_error(&d.sample(|x| f.eval(x)), &truth)?;
    let error_reflected = d.relative_error(&d.sample(|x| f.eval(reflect(x))), &truth)?;
    let stats = ObservationStats::from_ensemble(&data.observations)?;
    let mut loss_truth = Vec::with_capacity(loss_ensembles);
    let mut loss_reflected = Vec::with_capacity(loss_ensembles);
    for k in 0..loss_ensembles {
        let seed = derive_seed(bm.seed, data_tags::LOSS_ENSEMBLE_BASE + k as u64);
        let x = simulate_ensemble(&bm.model, &bm.init, bm.grid, bm.sweep.m_prime, seed)?;
        loss_truth.push(function_loss(f64::sin, &x, &stats, &bm.noise, None)?.total);
        loss_reflected.push(function_loss(|v| reflect(v).sin(), &x, &stats, &bm.noise, None)?.total);
    }
    let mean = loss_truth.iter().sum::<f64>() / loss_ensembles as f64;
    let mc_noise =
        (loss_truth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (loss_ensembles - 1) as f64).sqrt();
    let symmetric = SymmetryDemo {
        selected: sweep.selected,
        error_estimate,
        error_reflected,
        w2_test: sweep.estimator.w2_test.score,
        loss_gap: (mean - loss_reflected.iter().sum::<f64>() / loss_ensembles as f64).abs(),
        loss_truth,
        loss_reflected,
        mc_noise,
    };

    let mut ou = template.with_seed(derive_seed(template.seed, data_tags::STATIONARY_DEMO));
    ou.model = StateModelSpec::ornstein_uhlenbeck(1.0);
    ou.init = InitialDistribution::gaussian(0.0, 0.5);
    ou.observation = ObservationFunction::Sine;
    ou.noise = NoiseModel::None;
    let data = ou.generate()?;
    let sweep = run_algorithm1(&ou.model, &ou.init, &data.observations, &ou.noise, &ou.sweep)?;
    let error = relative_error(&sweep, &ou.observation)?;
    let rank_a1 = sweep
        .cedr
        .iter()
        .map(|r| (r.degree, r.records.iter().map(|rec| rec.rank).max().unwrap_or(0)))
        .collect();
    let stationary =
        StationaryDemo { selected: sweep.selected, error, w2_test: sweep.estimator.w2_test.score, rank_a1 };
    Ok(NonIdentReport { symmetric, stationary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_match_the_study_grid() {
        assert_eq!(default_sizes(), vec![3162, 3651, 4216, 4869, 5623]);
    }

    #[test]
    fn slope_of_a_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 - 0.46 * v).collect();
        assert!((least_squares_slope(&x, &y).unwrap() + 0.46).abs() < 1e-12);
        assert!(least_squares_slope(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn config_resolution_errors() {
        let mut c = ExperimentConfig::default();
        c.model.name = "lorenz".into();
        assert!(c.resolve().is_err());
        let mut c = ExperimentConfig::default();
        c.observation = "sin(x) +".into();
        assert!(c.resolve().is_err());
        let mut c = ExperimentConfig::default();
        c.sweep.degrees.clear();
        assert!(c.resolve().is_err());
        let mut c = ExperimentConfig::default();
        c.initial = InitialConfig::Uniform { lo: 1.0, hi: 0.0 };
        assert!(c.resolve().is_err());
    }

    #[test]
    fn expression_model_and_observation() {
        let c = ExperimentConfig {
            model: ModelConfig { drift: Some("x - x^3".into()), ..ModelConfig::default() },
            observation: "2*sin(x) + cos(6*x)".into(),
            ..ExperimentConfig::default()
        };
        let e = c.resolve().unwrap();
        assert!((e.model.drift(2.0) - (2.0 - 8.0)).abs() < 1e-12);
        let v = 0.7f64;
        assert!((e.observation.eval(v) - ObservationFunction::SineCosine.eval(v)).abs() < 1e-12);
    }

    #[test]
    fn snr_of_noisy_arch_is_recorded() {
        let c = ExperimentConfig {
            observation: "arch".into(),
            noise: NoiseConfig::IidGaussian { variance: 0.25 },
            paths: 20_000,
            ..ExperimentConfig::default()
        };
        let data = c.resolve().unwrap().generate().unwrap();
        let snr = data.snr.unwrap();
        assert!(snr > 0.6 && snr < 1.0, "snr {snr}");
    }

    #[test]
    fn small_convergence_study_runs() {
        let c = ExperimentConfig { paths: 2000, state_paths: Some(4000), ..ExperimentConfig::default() };
        let mut e = c.resolve().unwrap();
        e.grid = TimeGrid::new(0.05, 20).unwrap();
        assert_eq!(e.with_paths(1000).sweep.m_prime, 4000);
        e.state_paths = None;
        assert_eq!(e.with_paths(1000).sweep.m_prime, 1000);
        let st = run_convergence(&e, &[1000, 4000], 2, Some((1, 5))).unwrap();
        assert_eq!(st.errors.len(), 2);
        assert!(st.rate.is_finite());
        assert!(st.mean.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(st.to_csv().lines().count() == 5);
    }
}
