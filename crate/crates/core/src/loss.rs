//! The weighted quartic moment-matching loss and its derivatives.

use crate::error::{Error, Result};
use crate::moments::{compute_weights, MomentSystem, ObservationStats, Weights};
use crate::observation::NoiseModel;
use crate::state_model::TrajectoryEnsemble;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEvaluation {
    pub total: f64,
    /// Unweighted `E1, E2, E3, E4` (`E4` is 0 when the term is off).
    pub parts: [f64; 4],
    pub gradient: Option<DVector<f64>>,
}

/// Which terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub e1: bool,
    pub e2: bool,
    pub e3: bool,
    pub e4: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { e1: true, e2: true, e3: true, e4: true };
    pub const QUADRATIC: Terms = Terms { e1: true, e2: false, e3: false, e4: false };
    pub const SECOND: Terms = Terms { e1: false, e2: true, e3: false, e4: false };
    pub const LAG: Terms = Terms { e1: false, e2: false, e3: true, e4: false };
}

fn check(sys: &MomentSystem, c: &DVector<f64>) -> Result<()> {
    if c.len() != sys.dim {
        return Err(Error::DimensionMismatch { expected: sys.dim, got: c.len() });
    }
    Ok(())
}

/// Loss with the chosen terms, optionally with gradient and Hessian.
pub fn evaluate(
    sys: &MomentSystem,
    c: &DVector<f64>,
    terms: Terms,
    want_hessian: bool,
) -> Result<(LossEvaluation, Option<DMatrix<f64>>)> {
    check(sys, c)?;
    let n = sys.dim;
    let steps = sys.steps as f64;
    let w = sys.weights;
    let mut grad = DVector::zeros(n);
    let mut hess = want_hessian.then(|| DMatrix::zeros(n, n));

    let a1c = &sys.a1bar * c;
    let e1 = c.dot(&a1c) - 2.0 * c.dot(&sys.b1bar) + sys.b_tilde1;
    if terms.e1 {
        grad += (&a1c - &sys.b1bar) * (2.0 * w.w1);
        if let Some(h) = hess.as_mut() {
            *h += &sys.a1bar * (2.0 * w.w1);
        }
    }

    let mut quartic = |mats: &[DMatrix<f64>], b: &[f64], corr: &[f64], weight: f64, on: bool| -> f64 {
        let mut e = 0.0;
        for (l, a) in mats.iter().enumerate() {
            let ac = a * c;
            let r = c.dot(&ac) - b[l] + corr[l];
            e += r * r;
            if on {
                grad.axpy(4.0 * weight * r / steps, &ac, 1.0);
                if let Some(h) = hess.as_mut() {
                    *h += a * (4.0 * weight * r / steps);
                    h.ger(8.0 * weight / steps, &ac, &ac, 1.0);
                }
            }
        }
        e / steps
    };
    let e2 = quartic(&sys.a2, &sys.b2, &sys.noise_c_diag, w.w2, terms.e2);
    let e3 = quartic(&sys.a3, &sys.b3, &sys.noise_c_off, w.w3, terms.e3);

    let mut e4 = 0.0;
    let e4_on = terms.e4 && sys.e4.is_some();
    if let Some(t) = &sys.e4 {
        for (v, dy) in t.lphi.iter().zip(&t.dy) {
            let r = v.dot(c) - dy;
            e4 += r * r;
            if e4_on {
                grad.axpy(2.0 * w.w4 * r / steps, v, 1.0);
                if let Some(h) = hess.as_mut() {
                    h.ger(2.0 * w.w4 / steps, v, v, 1.0);
                }
            }
        }
        e4 /= steps;
    }

    let mut total = 0.0;
    if terms.e1 {
        total += w.w1 * e1;
    }
    if terms.e2 {
        total += w.w2 * e2;
    }
    if terms.e3 {
        total += w.w3 * e3;
    }
    if e4_on {
        total += w.w4 * e4;
    }
    let eval = LossEvaluation { total, parts: [e1, e2, e3, e4], gradient: Some(grad) };
    Ok((eval, hess))
}

/// Loss value with all available terms.
pub fn loss_value(sys: &MomentSystem, c: &DVector<f64>) -> Result<LossEvaluation> {
    let (mut ev, _) = evaluate(sys, c, Terms::ALL, false)?;
    ev.gradient = None;
    Ok(ev)
}

pub fn loss_gradient(sys: &MomentSystem, c: &DVector<f64>) -> Result<DVector<f64>> {
    let (ev, _) = evaluate(sys, c, Terms::ALL, false)?;
    Ok(ev.gradient.expect("gradient is always computed"))
}

pub fn loss_hessian(sys: &MomentSystem, c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (_, h) = evaluate(sys, c, Terms::ALL, true)?;
    Ok(h.expect("requested"))
}

/// `E1 + E2 + E3` of an arbitrary function, with its moments estimated
/// directly on the state ensemble `xprime`.
pub fn function_loss(
    f: impl Fn(f64) -> f64 + Sync,
    xprime: &TrajectoryEnsemble,
    stats: &ObservationStats,
    noise: &NoiseModel,
    weights: Option<Weights>,
) -> Result<LossEvaluation> {
    if xprime.grid != stats.grid {
        return Err(Error::Validation("state and observation time grids differ".into()));
    }
    noise.validate()?;
    let fx = ObservationStats::from_ensemble(&xprime.map(f))?;
    let steps = stats.steps();
    let grid = stats.grid;
    let mean_sq = |it: &mut dyn Iterator<Item = f64>| it.map(|r| r * r).sum::<f64>() / steps as f64;
    let e1 = mean_sq(&mut (1..=steps).map(|l| fx.mean[l] - stats.mean[l]));
    let e2 = mean_sq(&mut (1..=steps).map(|l| {
        fx.second[l] + noise.covariance(grid.time(l), grid.time(l)) - stats.second[l]
    }));
    let e3 = mean_sq(&mut (1..=steps).map(|l| {
        fx.lag[l - 1] + noise.covariance(grid.time(l - 1), grid.time(l)) - stats.lag[l - 1]
    }));
    let w = weights.unwrap_or_else(|| compute_weights(stats));
    Ok(LossEvaluation { total: w.w1 * e1 + w.w2 * e2 + w.w3 * e3, parts: [e1, e2, e3, 0.0], gradient: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{E4Terms, Weights};

    /// Small random-ish system from a deterministic generator.
    pub(crate) fn toy_system(n: usize, steps: usize, seed: u64, with_e4: bool) -> MomentSystem {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut psd = |sym: bool| {
            let g = DMatrix::from_fn(n, n, |_, _| next());
            if sym {
                &g * g.transpose()
            } else {
                (&g + g.transpose()) * 0.5
            }
        };
        let a1bar = psd(true);
        let a2: Vec<_> = (0..steps).map(|_| psd(true)).collect();
        let a3: Vec<_> = (0..steps).map(|_| psd(false)).collect();
        let mut next2 = || next();
        let b1bar = DVector::from_fn(n, |_, _| next2());
        let b2 = (0..steps).map(|_| next2() + 1.0).collect();
        let b3 = (0..steps).map(|_| next2()).collect();
        let noise_c_diag = (0..steps).map(|_| 0.1 * next2().abs()).collect();
        let noise_c_off = (0..steps).map(|_| 0.05 * next2()).collect();
        let e4 = with_e4.then(|| E4Terms {
            lphi: (0..steps).map(|_| DVector::from_fn(n, |_, _| next2())).collect(),
            dy: (0..steps).map(|_| next2()).collect(),
        });
        MomentSystem {
            dim: n,
            steps,
            a1bar,
            a2,
            a3,
            b1bar,
            b_tilde1: next2().abs(),
            b2,
            b3,
            weights: Weights { w1: 1.3, w2: 0.7, w3: 2.1, w4: 0.4 },
            noise_c_diag,
            noise_c_off,
            e4,
        }
    }

    #[test]
    fn zero_coefficients() {
        let sys = toy_system(4, 5, 1, false);
        let ev = loss_value(&sys, &DVector::zeros(4)).unwrap();
        let w = sys.weights;
        let mut expect = w.w1 * sys.b_tilde1;
        for l in 0..5 {
            expect += w.w2 * (sys.noise_c_diag[l] - sys.b2[l]).powi(2) / 5.0;
            expect += w.w3 * (sys.noise_c_off[l] - sys.b3[l]).powi(2) / 5.0;
        }
        assert!((ev.total - expect).abs() < 1e-12);
    }

    #[test]
    fn brute_force_two_by_one() {
        let sys = toy_system(2, 1, 9, false);
        let c = DVector::from_vec(vec![0.3, -1.2]);
        let (x, y) = (c[0], c[1]);
        let q = |a: &DMatrix<f64>| a[(0, 0)] * x * x + (a[(0, 1)] + a[(1, 0)]) * x * y + a[(1, 1)] * y * y;
        let e1 = q(&sys.a1bar) - 2.0 * (sys.b1bar[0] * x + sys.b1bar[1] * y) + sys.b_tilde1;
        let e2 = (q(&sys.a2[0]) - sys.b2[0] + sys.noise_c_diag[0]).powi(2);
        let e3 = (q(&sys.a3[0]) - sys.b3[0] + sys.noise_c_off[0]).powi(2);
        let w = sys.weights;
        let ev = loss_value(&sys, &c).unwrap();
        assert!((ev.total - (w.w1 * e1 + w.w2 * e2 + w.w3 * e3)).abs() < 1e-12);
        assert!((ev.parts[0] - e1).abs() < 1e-12);
    }

    #[test]
    fn quadratic_only_gradient() {
        let mut sys = toy_system(5, 3, 2, false);
        sys.weights.w2 = 0.0;
        sys.weights.w3 = 0.0;
        let c = DVector::from_fn(5, |i, _| i as f64 * 0.1 - 0.2);
        let g = loss_gradient(&sys, &c).unwrap();
        let expect = (&sys.a1bar * &c - &sys.b1bar) * (2.0 * sys.weights.w1);
        assert!((g - expect).amax() < 1e-14);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        for seed in 0..10 {
            let sys = toy_system(6, 4, seed, seed % 2 == 0);
            let c = DVector::from_fn(6, |i, _| ((i as f64 + seed as f64) * 0.37).sin());
            let g = loss_gradient(&sys, &c).unwrap();
            let h = loss_hessian(&sys, &c).unwrap();
            for i in 0..6 {
                let step = 1e-6 * (1.0 + c[i].abs());
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[i] += step;
                cm[i] -= step;
                let fd = (loss_value(&sys, &cp).unwrap().total - loss_value(&sys, &cm).unwrap().total) / (2.0 * step);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "grad {i}: {fd} vs {}", g[i]);
                let hd = (loss_gradient(&sys, &cp).unwrap() - loss_gradient(&sys, &cm).unwrap()) / (2.0 * step);
                for j in 0..6 {
                    assert!((hd[j] - h[(j, i)]).abs() <= 1e-5 * h[(j, i)].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn symmetrisation_invariance() {
        let mut sys = toy_system(4, 2, 3, false);
        let c = DVector::from_vec(vec![0.1, 0.5, -0.3, 0.8]);
        let before = loss_value(&sys, &c).unwrap().total;
        // add an antisymmetric part
        let k = DMatrix::from_fn(4, 4, |i, j| (i as f64) - (j as f64));
        for a in sys.a3.iter_mut() {
            *a += &k;
        }
        assert!((loss_value(&sys, &c).unwrap().total - before).abs() < 1e-12);
    }

    #[test]
    fn function_loss_agrees_with_quadratic_form() {
        use crate::bspline::{BSplineBasis, SplineFunction};
        use crate::moments::assemble_state_moments;
        use crate::state_model::{simulate_ensemble, InitialDistribution, StateModelSpec, TimeGrid};
        let grid = TimeGrid::new(0.05, 10).unwrap();
        let model = StateModelSpec::ornstein_uhlenbeck(1.0);
        let init = InitialDistribution::gaussian(0.5, 0.3);
        let x = simulate_ensemble(&model, &init, grid, 4000, 5).unwrap();
        let y = x.map(|v| v.sin());
        let stats = ObservationStats::from_ensemble(&y).unwrap();
        let (lo, hi) = x.min_max();
        let basis = BSplineBasis::new(2, 6, lo, hi).unwrap();
        let state = assemble_state_moments(&x, &basis, None).unwrap();
        let noise = NoiseModel::IidGaussian { variance: 0.1 };
        let sys = MomentSystem::assemble(&state, &stats, &noise).unwrap();
        let c = DVector::from_vec(vec![-0.4, 0.1, 0.3, 0.5, 0.2, 0.9]);
        let spline = SplineFunction::new(basis, c.clone()).unwrap();
        let direct = function_loss(|v| spline.eval(v), &x, &stats, &noise, None).unwrap();
        let quad = loss_value(&sys, &c).unwrap();
        for k in 0..3 {
            assert!((direct.parts[k] - quad.parts[k]).abs() <= 1e-10 * quad.parts[k].abs().max(1e-12), "part {k}");
        }
        assert!((direct.total - quad.total).abs() <= 1e-9 * quad.total);
    }

    #[test]
    fn dimension_mismatch() {
        let sys = toy_system(3, 2, 4, false);
        assert!(loss_value(&sys, &DVector::zeros(4)).is_err());
    }
}
