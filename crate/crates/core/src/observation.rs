//! Observation functions `f` and additive observation noise.

use crate::bspline::SplineFunction;
use crate::error::{validation, Error, Result};
use crate::expr::Expr;
use crate::rng::{substream, Stream};
use crate::state_model::TrajectoryEnsemble;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservationFunction {
    /// `sin(x)`
    Sine,
    /// `2 sin(x) + cos(6x)`
    SineCosine,
    /// `(-2(1-x)^3 + 1.5(1-x) + 0.5) 1_{[0,1]}(x)`
    Arch,
    Spline(SplineFunction),
    Expr(Expr),
}

impl ObservationFunction {
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "sine" | "sin" => Some(ObservationFunction::Sine),
            "sine-cosine" | "sine_cosine" => Some(ObservationFunction::SineCosine),
            "arch" => Some(ObservationFunction::Arch),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ObservationFunction::Sine => "sine".into(),
            ObservationFunction::SineCosine => "sine-cosine".into(),
            ObservationFunction::Arch => "arch".into(),
            ObservationFunction::Spline(s) => format!("spline(degree={}, n={})", s.basis.degree(), s.basis.dim()),
            ObservationFunction::Expr(e) => e.source().to_string(),
        }
    }

    /// Value and whether `x` lies in the function's support (always true
    /// except for splines evaluated outside their knot range).
    #[inline]
    pub fn eval_flagged(&self, x: f64) -> (f64, bool) {
        match self {
            ObservationFunction::Sine => (x.sin(), true),
            ObservationFunction::SineCosine => (2.0 * x.sin() + (6.0 * x).cos(), true),
            ObservationFunction::Arch => {
                let v = if (0.0..=1.0).contains(&x) {
                    let s = 1.0 - x;
                    -2.0 * s * s * s + 1.5 * s + 0.5
                } else {
                    0.0
                };
                (v, true)
            }
            ObservationFunction::Spline(s) => s.eval_flagged(x),
            ObservationFunction::Expr(e) => (e.eval1(x), true),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_flagged(x).0
    }
}

/// Evaluate `f` at `x`.
pub fn evaluate_observation(f: &ObservationFunction, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return validation(format!("observation evaluated at non-finite state {x}"));
    }
    Ok(f.eval(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    None,
    IidGaussian { variance: f64 },
    /// Covariance `C(s, t)` of a zero-mean noise process; accepted by the loss
    /// correction, not sampled.
    StationaryCovariance(Expr),
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::IidGaussian { variance } if !(*variance >= 0.0) || !variance.is_finite() => {
                validation(format!("noise variance must be nonnegative, got {variance}"))
            }
            NoiseModel::StationaryCovariance(c) => {
                for &(s, t) in &[(0.0, 0.01), (0.3, 0.7), (1.0, 0.0), (0.5, 2.0)] {
                    let (a, b) = (c.eval(&[s, t]), c.eval(&[t, s]));
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                        return validation(format!("covariance is not symmetric: C({s},{t}) = {a}, C({t},{s}) = {b}"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `C(s, t) = E[eta_s eta_t]`.
    pub fn covariance(&self, s: f64, t: f64) -> f64 {
        match self {
            NoiseModel::None => 0.0,
            NoiseModel::IidGaussian { variance } => {
                if s == t {
                    *variance
                } else {
                    0.0
                }
            }
            NoiseModel::StationaryCovariance(c) => c.eval(&[s, t]),
        }
    }

    pub fn variance(&self) -> f64 {
        self.covariance(0.0, 0.0)
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NoiseModel::None)
    }
}

/// Add independent noise to every entry; path `m` uses its own noise stream.
pub fn add_noise(values: &TrajectoryEnsemble, noise: &NoiseModel, seed: u64) -> Result<TrajectoryEnsemble> {
    noise.validate()?;
    match noise {
        NoiseModel::None => Ok(values.clone()),
        NoiseModel::IidGaussian { variance } => {
            let sd = variance.sqrt();
            let width = values.grid.len();
            let mut out = values.values().to_vec();
            out.par_chunks_mut(width).enumerate().for_each(|(m, path)| {
                let mut rng = substream(seed, Stream::Noise, m as u64);
                for v in path.iter_mut() {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    *v += sd * xi;
                }
            });
            TrajectoryEnsemble::from_values(values.grid, seed, out)
        }
        NoiseModel::StationaryCovariance(_) => Err(Error::Unsupported(
            "sampling is implemented for iid Gaussian noise only; general covariances enter the loss correction".into(),
        )),
    }
}

/// `Y = f(X) + eta`.
pub fn observe_ensemble(
    x: &TrajectoryEnsemble,
    f: &ObservationFunction,
    noise: &NoiseModel,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let clean = x.map(|v| f.eval(v));
    let mut y = add_noise(&clean, noise, seed)?;
    y.seed = seed;
    Ok(y)
}
