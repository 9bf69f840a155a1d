//! Multi-start interior-point minimisation of the loss over the bounded
//! hypothesis space.

use crate::bspline::BSplineSpace;
use crate::error::{Error, Result};
use crate::linalg::{pinv_solve, symmetrize};
use crate::loss::{evaluate, loss_value, LossEvaluation, Terms};
use crate::moments::MomentSystem;
use crate::rng::{substream, Stream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Newton iterations per barrier stage.
    pub max_iterations: usize,
    /// Stop a stage when the Newton decrement falls below this fraction of the
    /// starting objective.
    pub gradient_tolerance: f64,
    pub barrier_start: f64,
    pub barrier_end: f64,
    pub barrier_factor: f64,
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-14,
            barrier_start: 1e-1,
            barrier_end: 1e-8,
            barrier_factor: 0.1,
            random_starts: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.gradient_tolerance > 0.0
            && self.barrier_end > 0.0
            && self.barrier_start >= self.barrier_end
            && self.barrier_factor > 0.0
            && self.barrier_factor < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub label: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub c_hat: DVector<f64>,
    pub loss: LossEvaluation,
    pub start_label: String,
    pub converged: bool,
    pub iterations: usize,
    pub starts: Vec<StartRecord>,
    /// Another start reached the same loss at a clearly different coefficient vector.
    pub degenerate: bool,
}

/// Linear inequality data `y_min <= Phi c <= y_max`.
struct Polytope {
    phi: DMatrix<f64>,
    lo: f64,
    hi: f64,
}

impl Polytope {
    fn new(space: &BSplineSpace) -> Self {
        Polytope { phi: space.constraint_matrix(), lo: space.y_min, hi: space.y_max }
    }

    fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn collapsed(&self) -> bool {
        self.hi - self.lo <= 1e-12 * (1.0 + self.lo.abs() + self.hi.abs())
    }

    fn center(&self, n: usize) -> DVector<f64> {
        DVector::from_element(n, self.mid())
    }

    fn strictly_inside(&self, c: &DVector<f64>) -> bool {
        (&self.phi * c).iter().all(|&v| v > self.lo && v < self.hi)
    }

    /// Pull `c` towards the centre until it is strictly inside.
    fn interiorize(&self, c: &DVector<f64>) -> DVector<f64> {
        let center = self.center(c.len());
        let d = &self.phi * (c - &center);
        let mid = self.mid();
        let mut t_max = f64::INFINITY;
        for &v in d.iter() {
            if v > 0.0 {
                t_max = t_max.min((self.hi - mid) / v);
            } else if v < 0.0 {
                t_max = t_max.min((self.lo - mid) / v);
            }
        }
        if t_max > 1.0 / 0.99 {
            return c.clone();
        }
        let t = (0.99 * t_max).min(1.0);
        &center + (c - &center) * t
    }

    /// Largest step along `d` keeping 1% of every slack.
    fn max_step(&self, c: &DVector<f64>, d: &DVector<f64>) -> f64 {
        let v = &self.phi * c;
        let dv = &self.phi * d;
        let mut alpha = f64::INFINITY;
        for k in 0..v.len() {
            if dv[k] > 0.0 {
                alpha = alpha.min((self.hi - v[k]) / dv[k]);
            } else if dv[k] < 0.0 {
                alpha = alpha.min((self.lo - v[k]) / dv[k]);
            }
        }
        0.99 * alpha
    }

    /// Barrier value, gradient and Hessian scaled by `mu`.
    fn barrier(&self, c: &DVector<f64>, mu: f64) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let v = &self.phi * c;
        let mut val = 0.0;
        let mut gw = DVector::zeros(v.len());
        let mut hw = DVector::zeros(v.len());
        for k in 0..v.len() {
            let (s1, s2) = (v[k] - self.lo, self.hi - v[k]);
            if !(s1 > 0.0 && s2 > 0.0) {
                return None;
            }
            val -= s1.ln() + s2.ln();
            gw[k] = -1.0 / s1 + 1.0 / s2;
            hw[k] = 1.0 / (s1 * s1) + 1.0 / (s2 * s2);
        }
        let g = self.phi.tr_mul(&gw) * mu;
        let mut scaled = self.phi.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row *= hw[k];
        }
        let h = self.phi.tr_mul(&scaled) * mu;
        Some((mu * val, g, h))
    }
}

struct Outcome {
    c: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn objective(sys: &MomentSystem, terms: Terms, poly: &Polytope, c: &DVector<f64>, mu: f64) -> Option<f64> {
    let base = evaluate(sys, c, terms, false).ok()?.0.total;
    if mu == 0.0 {
        return poly.strictly_inside(c).then_some(base);
    }
    poly.barrier(c, mu).map(|(b, _, _)| base + b)
}

/// Newton direction with eigenvalues replaced by their magnitudes (floored).
fn modified_newton(g: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let eig = symmetrize(h).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let floor = (1e-12 * top).max(f64::MIN_POSITIVE);
    let mut d = DVector::zeros(g.len());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        d -= v * (v.dot(g) / lam.abs().max(floor));
    }
    d
}

/// Barrier continuation followed by a barrier-free polishing stage.
fn barrier_minimize(
    sys: &MomentSystem,
    terms: Terms,
    poly: &Polytope,
    start: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> Outcome {
    let mut c = start.clone();
    let scale = evaluate(sys, &c, terms, false).map(|e| e.0.total.abs()).unwrap_or(0.0);
    if !(scale > 0.0) || !scale.is_finite() {
        return Outcome { c, iterations: 0, converged: true };
    }
    let mut mus = Vec::new();
    let mut mu = cfg.barrier_start;
    while mu >= cfg.barrier_end * (1.0 - 1e-12) {
        mus.push(mu * scale);
        mu *= cfg.barrier_factor;
    }
    mus.push(0.0);
    let mut iterations = 0;
    let mut converged = false;
    let mut barrier_converged = false;
    for &mu in &mus {
        converged = false;
        for _ in 0..cfg.max_iterations {
            let Ok((ev, Some(mut h))) = evaluate(sys, &c, terms, true) else { break };
            let mut g = ev.gradient.expect("gradient");
            let mut f = ev.total;
            if mu > 0.0 {
                let Some((bv, bg, bh)) = poly.barrier(&c, mu) else { break };
                f += bv;
                g += bg;
                h += bh;
            }
            let d = modified_newton(&g, &h);
            let slope = g.dot(&d);
            iterations += 1;
            if -slope <= cfg.gradient_tolerance * scale || !slope.is_finite() {
                converged = true;
                break;
            }
            let mut alpha = poly.max_step(&c, &d).min(1.0);
            let mut moved = false;
            for _ in 0..60 {
                let trial = &c + &d * alpha;
                if let Some(ft) = objective(sys, terms, poly, &trial, mu) {
                    if ft <= f + 1e-4 * alpha * slope {
                        moved = ft < f || alpha * d.amax() > 1e-15 * (1.0 + c.amax());
                        c = trial;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved {
                converged = -slope <= 1e-8 * scale;
                // the unconstrained polish may be pinned against a face
                if mu == 0.0 && poly.max_step(&c, &d) < 1e-8 * (1.0 + c.amax()) {
                    converged = barrier_converged;
                }
                break;
            }
        }
        if mu > 0.0 {
            barrier_converged = converged;
        }
    }
    Outcome { c, iterations, converged }
}

/// Deterministic starts followed by random feasible points, with labels.
pub fn initial_points(
    sys: &MomentSystem,
    space: &BSplineSpace,
    cfg: &OptimizerConfig,
) -> Result<Vec<(String, DVector<f64>)>> {
    if space.dim() != sys.dim {
        return Err(Error::DimensionMismatch { expected: space.dim(), got: sys.dim });
    }
    let n = sys.dim;
    let poly = Polytope::new(space);
    if poly.collapsed() {
        return Ok(vec![("constant".into(), poly.center(n))]);
    }
    let ls = pinv_solve(&sys.a1bar, &sys.b1bar, 1e-10)?;
    let ls_inside = poly.interiorize(&ls);
    let quad = barrier_minimize(sys, Terms::QUADRATIC, &poly, &ls_inside, cfg).c;
    let second = barrier_minimize(sys, Terms::SECOND, &poly, &quad, cfg).c;
    let lag = barrier_minimize(sys, Terms::LAG, &poly, &quad, cfg).c;
    let mut starts = vec![
        ("least-squares".to_string(), ls),
        ("quadratic".to_string(), quad),
        ("second-moment".to_string(), second),
        ("lag-moment".to_string(), lag),
    ];
    let mid = poly.mid();
    let half = 0.49 * (poly.hi - poly.lo);
    for k in 0..cfg.random_starts {
        let mut rng = substream(cfg.seed, Stream::Optimizer, k as u64);
        let c = DVector::from_fn(n, |_, _| mid + half * (2.0 * rng.gen::<f64>() - 1.0));
        starts.push((format!("random-{k}"), c));
    }
    Ok(starts)
}

/// Minimise the loss over the hypothesis space from every initial point.
pub fn minimize(sys: &MomentSystem, space: &BSplineSpace, cfg: &OptimizerConfig) -> Result<MinimizeResult> {
    cfg.validate()?;
    let poly = Polytope::new(space);
    let starts = initial_points(sys, space, cfg)?;
    if poly.collapsed() {
        let c = starts[0].1.clone();
        let loss = loss_value(sys, &c)?;
        let record = StartRecord {
            label: "constant".into(),
            initial_loss: loss.total,
            final_loss: loss.total,
            iterations: 0,
            converged: true,
        };
        return Ok(MinimizeResult {
            c_hat: c,
            loss,
            start_label: record.label.clone(),
            converged: true,
            iterations: 0,
            starts: vec![record],
            degenerate: false,
        });
    }
    let runs: Vec<(StartRecord, DVector<f64>)> = starts
        .par_iter()
        .map(|(label, c0)| {
            let c0 = poly.interiorize(c0);
            let initial_loss = loss_value(sys, &c0).map(|e| e.total).unwrap_or(f64::INFINITY);
            let out = barrier_minimize(sys, Terms::ALL, &poly, &c0, cfg);
            let final_loss = loss_value(sys, &out.c).map(|e| e.total).unwrap_or(f64::INFINITY);
            let (c, final_loss) = if final_loss <= initial_loss { (out.c, final_loss) } else { (c0, initial_loss) };
            let record =
                StartRecord { label: label.clone(), initial_loss, final_loss, iterations: out.iterations, converged: out.converged };
            (record, c)
        })
        .collect();
    let mut best = 0;
    for (k, (r, _)) in runs.iter().enumerate() {
        if r.final_loss < runs[best].0.final_loss {
            best = k;
        }
    }
    let (best_record, c_hat) = &runs[best];
    let tol = 1e-9 * best_record.final_loss.abs().max(1e-300);
    let degenerate = runs.iter().any(|(r, c)| {
        (r.final_loss - best_record.final_loss).abs() <= tol && (c - c_hat).norm() > 1e-3 * (1.0 + c_hat.norm())
    });
    Ok(MinimizeResult {
        c_hat: c_hat.clone(),
        loss: loss_value(sys, c_hat)?,
        start_label: best_record.label.clone(),
        converged: best_record.converged,
        iterations: best_record.iterations,
        starts: runs.into_iter().map(|(r, _)| r).collect(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::BSplineBasis;
    use crate::moments::Weights;

    fn system_from(a1: DMatrix<f64>, b1: DVector<f64>, steps: usize) -> MomentSystem {
        let n = a1.nrows();
        MomentSystem {
            dim: n,
            steps,
            a1bar: a1,
            a2: vec![DMatrix::identity(n, n) * 0.1; steps],
            a3: vec![DMatrix::identity(n, n) * 0.05; steps],
            b1bar: b1,
            b_tilde1: 0.0,
            b2: vec![0.3; steps],
            b3: vec![0.1; steps],
            weights: Weights { w1: 1.0, w2: 0.0, w3: 0.0, w4: 0.0 },
            noise_c_diag: vec![0.0; steps],
            noise_c_off: vec![0.0; steps],
            e4: None,
        }
    }

    fn space(n: usize, lo: f64, hi: f64) -> BSplineSpace {
        BSplineSpace::new(BSplineBasis::new(1, n, 0.0, 1.0).unwrap(), lo, hi).unwrap()
    }

    #[test]
    fn convex_quadratic_interior_optimum() {
        let g = DMatrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64 * 0.7).sin());
        let a1 = &g * g.transpose() + DMatrix::identity(4, 4);
        let target = DVector::from_vec(vec![0.2, -0.1, 0.3, 0.0]);
        let b1 = &a1 * &target;
        let sys = system_from(a1, b1, 3);
        let res = minimize(&sys, &space(4, -1.0, 1.0), &OptimizerConfig::default()).unwrap();
        assert!((&res.c_hat - &target).amax() < 1e-6, "{}", res.c_hat);
        let starts = initial_points(&sys, &space(4, -1.0, 1.0), &OptimizerConfig::default()).unwrap();
        assert!((&starts[0].1 - &starts[1].1).amax() < 1e-6);
        assert!(res.converged);
    }

    #[test]
    fn rank_one_least_squares_start_is_minimum_norm() {
        let u = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let a1 = &u * u.transpose();
        let b1 = &u * 0.5;
        let sys = system_from(a1, b1, 2);
        let starts = initial_points(&sys, &space(3, -5.0, 5.0), &OptimizerConfig::default()).unwrap();
        let expect = &u * (0.5 / 9.0);
        assert!((&starts[0].1 - expect).amax() < 1e-12);
    }

    #[test]
    fn zero_data_starts_at_zero() {
        let sys = system_from(DMatrix::identity(3, 3), DVector::zeros(3), 2);
        let starts = initial_points(&sys, &space(3, -1.0, 1.0), &OptimizerConfig::default()).unwrap();
        for (_, c) in &starts[..2] {
            assert!(c.amax() < 1e-12);
        }
    }

    #[test]
    fn collapsed_bounds_give_constant() {
        let sys = system_from(DMatrix::identity(5, 5), DVector::from_element(5, 0.3), 2);
        let res = minimize(&sys, &space(5, 3.0, 3.0), &OptimizerConfig::default()).unwrap();
        assert!((res.c_hat.add_scalar(-3.0)).amax() < 1e-12);
    }

    #[test]
    fn active_bounds_are_respected() {
        // unconstrained optimum at 2.0 everywhere, bounds [-1, 1]
        let a1 = DMatrix::identity(4, 4);
        let b1 = DVector::from_element(4, 2.0);
        let sys = system_from(a1, b1, 2);
        let sp = space(4, -1.0, 1.0);
        let res = minimize(&sys, &sp, &OptimizerConfig::default()).unwrap();
        assert!(sp.max_violation(&res.c_hat) <= 1e-8 * 3.0);
        assert!((res.c_hat.add_scalar(-1.0)).amax() < 1e-4, "{}", res.c_hat);
        for r in &res.starts {
            assert!(res.loss.total <= r.initial_loss + 1e-12);
        }
    }

    #[test]
    fn quartic_nonconvex_problem_decreases() {
        let n = 5;
        let steps = 4;
        let mut sys = system_from(DMatrix::identity(n, n) * 0.5, DVector::from_element(n, 0.1), steps);
        sys.weights = Weights { w1: 1.0, w2: 3.0, w3: 2.0, w4: 0.0 };
        sys.b2 = vec![0.4; steps];
        let sp = space(n, -1.0, 1.0);
        let res = minimize(&sys, &sp, &OptimizerConfig { random_starts: 3, ..Default::default() }).unwrap();
        assert!(sp.max_violation(&res.c_hat) == 0.0);
        let min_start = res.starts.iter().map(|r| r.initial_loss).fold(f64::INFINITY, f64::min);
        assert!(res.loss.total <= min_start);
        // first-order condition: the optimum is interior, so the gradient vanishes
        let g = crate::loss::loss_gradient(&sys, &res.c_hat).unwrap();
        let g0 = crate::loss::loss_gradient(&sys, &DVector::zeros(n)).unwrap();
        assert!(g.norm() <= 1e-6 * g0.norm(), "{} vs {}", g.norm(), g0.norm());
    }

    #[test]
    fn deterministic() {
        let mut sys = system_from(DMatrix::identity(4, 4), DVector::from_element(4, 0.2), 3);
        sys.weights.w2 = 1.0;
        let sp = space(4, -1.0, 1.0);
        let cfg = OptimizerConfig { seed: 11, ..Default::default() };
        assert_eq!(minimize(&sys, &sp, &cfg).unwrap(), minimize(&sys, &sp, &cfg).unwrap());
    }
}
