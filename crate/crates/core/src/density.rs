//! Histogram estimate of the time-averaged occupation density and the
//! `L^2(rho)` geometry built on it (midpoint Riemann sums on a uniform grid).

use crate::bspline::{BSplineBasis, MAX_DEGREE};
use crate::error::{validation, Error, Result};
use crate::state_model::TrajectoryEnsemble;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const DEFAULT_GRID_SIZE: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub h: f64,
    /// Cell midpoints.
    pub centers: Vec<f64>,
    /// Time-averaged density at the cell midpoints.
    pub rho: Vec<f64>,
    /// Per-time densities for `l = 1..=L` (row `l - 1`).
    pub per_time: Option<Vec<Vec<f64>>>,
}

impl DensityGrid {
    /// Uniform grid of `size` cells on `[r_min, r_max]` carrying `rho`,
    /// renormalised so that `h * sum(rho) = 1`.
    pub fn from_values(r_min: f64, r_max: f64, rho: Vec<f64>) -> Result<Self> {
        let size = rho.len();
        if size == 0 || !(r_min < r_max) {
            return validation("density grid needs cells and r_min < r_max");
        }
        if rho.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return validation("density values must be finite and nonnegative");
        }
        let h = (r_max - r_min) / size as f64;
        let mass: f64 = rho.iter().sum::<f64>() * h;
        if !(mass > 0.0) {
            return validation("density has zero mass");
        }
        let rho = rho.into_iter().map(|v| v / mass).collect();
        let centers = (0..size).map(|g| r_min + (g as f64 + 0.5) * h).collect();
        Ok(DensityGrid { r_min, r_max, h, centers, rho, per_time: None })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    #[inline]
    pub fn cell(&self, x: f64) -> usize {
        (((x - self.r_min) / self.h).max(0.0) as usize).min(self.len() - 1)
    }

    /// Function values at the cell midpoints.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.centers.iter().map(|&x| f(x)).collect()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: v.len() });
        }
        Ok(())
    }

    /// `<f, g>` in `L^2(rho)`.
    pub fn inner(&self, f_vals: &[f64], g_vals: &[f64]) -> Result<f64> {
        self.check_len(f_vals)?;
        self.check_len(g_vals)?;
        Ok(self.h * f_vals.iter().zip(g_vals).zip(&self.rho).map(|((f, g), r)| f * g * r).sum::<f64>())
    }

    pub fn norm(&self, f_vals: &[f64]) -> Result<f64> {
        Ok(self.inner(f_vals, f_vals)?.max(0.0).sqrt())
    }

    /// `||f - g||` relative to `||g||` (absolute if `g` has zero norm).
    pub fn relative_error(&self, f_vals: &[f64], truth_vals: &[f64]) -> Result<f64> {
        let err = l2rho_distance(f_vals, truth_vals, self)?;
        let scale = self.norm(truth_vals)?;
        Ok(if scale > 0.0 { err / scale } else { err })
    }

    /// Coefficients of the `L^2(rho)` projection of `f` onto the span of `basis`.
    pub fn project(&self, basis: &BSplineBasis, f_vals: &[f64]) -> Result<DVector<f64>> {
        self.check_len(f_vals)?;
        let gram = gram_matrix(basis, self);
        let mut rhs = DVector::zeros(basis.dim());
        let mut nz = [0.0; MAX_DEGREE + 1];
        for (g, &x) in self.centers.iter().enumerate() {
            let w = self.h * self.rho[g] * f_vals[g];
            if w == 0.0 {
                continue;
            }
            if let Some(first) = basis.eval_nonzero(x, &mut nz) {
                for a in 0..=basis.degree() {
                    rhs[first + a] += w * nz[a];
                }
            }
        }
        crate::linalg::pinv_solve(&gram, &rhs, 1e-12)
    }
}

/// Support from all samples (including `t_0`); density from `l = 1..=L` only.
pub fn estimate_density(x: &TrajectoryEnsemble, size: usize) -> Result<DensityGrid> {
    let m = x.n_paths();
    let steps = x.steps();
    if m == 0 || size == 0 {
        return validation("density estimation needs a nonempty ensemble and grid");
    }
    if m * (steps + 1) < size {
        return validation(format!("{} samples cannot fill a {size}-cell density grid", m * (steps + 1)));
    }
    let (mut r_min, mut r_max) = x.min_max();
    if r_min == r_max {
        let pad = 1e-6 * r_min.abs().max(1.0);
        r_min -= pad;
        r_max += pad;
    }
    let h = (r_max - r_min) / size as f64;
    let cell = |v: f64| (((v - r_min) / h).max(0.0) as usize).min(size - 1);
    let mut counts = vec![vec![0u64; size]; steps];
    for path in x.paths() {
        for l in 1..=steps {
            counts[l - 1][cell(path[l])] += 1;
        }
    }
    let per_norm = 1.0 / (m as f64 * h);
    let per_time: Vec<Vec<f64>> =
        counts.iter().map(|row| row.iter().map(|&c| c as f64 * per_norm).collect()).collect();
    let mut rho = vec![0.0; size];
    for row in &per_time {
        for (r, v) in rho.iter_mut().zip(row) {
            *r += v;
        }
    }
    rho.iter_mut().for_each(|r| *r /= steps as f64);
    let centers = (0..size).map(|g| r_min + (g as f64 + 0.5) * h).collect();
    Ok(DensityGrid { r_min, r_max, h, centers, rho, per_time: Some(per_time) })
}

/// `sqrt(h * sum (f - g)^2 rho)`.
pub fn l2rho_distance(f_vals: &[f64], g_vals: &[f64], d: &DensityGrid) -> Result<f64> {
    d.check_len(f_vals)?;
    d.check_len(g_vals)?;
    let s: f64 = f_vals.iter().zip(g_vals).zip(&d.rho).map(|((f, g), r)| (f - g) * (f - g) * r).sum();
    Ok((d.h * s).sqrt())
}

/// `B(i, j) = h * sum_g phi_i(x_g) phi_j(x_g) rho(x_g)`.
pub fn gram_matrix(basis: &BSplineBasis, d: &DensityGrid) -> DMatrix<f64> {
    let n = basis.dim();
    let p = basis.degree();
    let mut b = DMatrix::zeros(n, n);
    let mut nz = [0.0; MAX_DEGREE + 1];
    for (g, &x) in d.centers.iter().enumerate() {
        let w = d.h * d.rho[g];
        if w == 0.0 {
            continue;
        }
        if let Some(first) = basis.eval_nonzero(x, &mut nz) {
            for a in 0..=p {
                for c in 0..=p {
                    b[(first + a, first + c)] += w * nz[a] * nz[c];
                }
            }
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_model::{simulate_ensemble, Coefficient, InitialDistribution, StateModelSpec, TimeGrid};

    fn dw_ensemble(m: usize) -> TrajectoryEnsemble {
        simulate_ensemble(
            &StateModelSpec::double_well(),
            &InitialDistribution::double_well_default(),
            TimeGrid::new(0.01, 100).unwrap(),
            m,
            4,
        )
        .unwrap()
    }

    #[test]
    fn normalised_and_mean_of_rows() {
        let d = estimate_density(&dw_ensemble(2000), 200).unwrap();
        assert!((d.h * d.rho.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        let rows = d.per_time.as_ref().unwrap();
        assert_eq!(rows.len(), 100);
        for g in 0..d.len() {
            let mean = rows.iter().map(|r| r[g]).sum::<f64>() / rows.len() as f64;
            assert!((mean - d.rho[g]).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_concentrates_in_one_cell() {
        let spec = StateModelSpec::new("still", Coefficient::constant(0.0), Coefficient::constant(0.0));
        let x = simulate_ensemble(&spec, &InitialDistribution::PointMass(0.7), TimeGrid::new(0.01, 10).unwrap(), 30, 0)
            .unwrap();
        let d = estimate_density(&x, 20).unwrap();
        let nonzero: Vec<usize> = (0..d.len()).filter(|&g| d.rho[g] > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((d.rho[nonzero[0]] * d.h - 1.0).abs() < 1e-12);
        assert!(d.r_min <= 0.7 && 0.7 <= d.r_max);
    }

    #[test]
    fn distances() {
        let d = DensityGrid::from_values(0.0, 1.0, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let f: Vec<f64> = (0..10).map(|g| (g as f64).sin()).collect();
        let g: Vec<f64> = (0..10).map(|g| (g as f64 * 0.3).cos()).collect();
        assert_eq!(l2rho_distance(&f, &f, &d).unwrap(), 0.0);
        let shifted: Vec<f64> = f.iter().map(|v| v + 0.75).collect();
        assert!((l2rho_distance(&f, &shifted, &d).unwrap() - 0.75).abs() < 1e-12);
        // brute force with the raw weights (total mass 25 over width 0.1)
        let raw = [1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let mut s = 0.0;
        for i in 0..10 {
            s += (f[i] - g[i]).powi(2) * raw[i] / 25.0;
        }
        assert!((l2rho_distance(&f, &g, &d).unwrap() - s.sqrt()).abs() < 1e-12);
        assert!(l2rho_distance(&f[..3], &g, &d).is_err());
    }

    #[test]
    fn gram_properties() {
        let x = dw_ensemble(2000);
        let d = estimate_density(&x, 200).unwrap();
        let (lo, hi) = (d.r_min, d.r_max);
        let b0 = gram_matrix(&BSplineBasis::new(0, 12, lo, hi).unwrap(), &d);
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    assert_eq!(b0[(i, j)], 0.0);
                }
            }
        }
        let basis = BSplineBasis::new(3, 15, lo, hi).unwrap();
        let b = gram_matrix(&basis, &d);
        assert!((&b - b.transpose()).amax() < 1e-15);
        let eig = b.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);
        // row sums collapse to h * sum phi_i rho by partition of unity
        for i in 0..15 {
            let row: f64 = b.row(i).sum();
            let direct: f64 = d.centers.iter().enumerate().map(|(g, &x)| d.h * basis.eval(x).values[i] * d.rho[g]).sum();
            assert!((row - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_reproduces_span_members() {
        let d = estimate_density(&dw_ensemble(2000), 200).unwrap();
        let basis = BSplineBasis::new(1, 6, d.r_min, d.r_max).unwrap();
        // linear functions are in the span of degree-1 splines
        let vals = d.sample(|x| 2.0 * x - 0.5);
        let c = d.project(&basis, &vals).unwrap();
        let f = crate::bspline::SplineFunction::new(basis, c).unwrap();
        let fit = d.sample(|x| f.eval(x));
        assert!(l2rho_distance(&fit, &vals, &d).unwrap() < 1e-8);
    }
}
