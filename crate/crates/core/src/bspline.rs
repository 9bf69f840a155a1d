//! Clamped B-spline bases on uniform knots and the bound-constrained
//! hypothesis space built on them.
//!
//! With degree `p` and dimension `n` there are `K = n - p` uniform cells on
//! `[r_min, r_max]`; the end knots are repeated `p + 1` times. Cells are
//! half-open `[r_i, r_{i+1})` except the last, which is closed.

use crate::error::{validation, Error, Result};
use crate::state_model::TrajectoryEnsemble;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const MAX_DEGREE: usize = 3;

/// Values of all `n` basis functions at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    pub values: Vec<f64>,
    pub in_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    dim: usize,
    r_min: f64,
    r_max: f64,
    cells: usize,
    h: f64,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(degree: usize, dim: usize, r_min: f64, r_max: f64) -> Result<Self> {
        if degree > MAX_DEGREE {
            return validation(format!("degree {degree} exceeds the supported maximum {MAX_DEGREE}"));
        }
        if dim < degree + 1 {
            return validation(format!("dimension {dim} too small for degree {degree} (need at least {})", degree + 1));
        }
        if !(r_min < r_max) || !r_min.is_finite() || !r_max.is_finite() {
            return validation(format!("invalid support [{r_min}, {r_max}]"));
        }
        let cells = dim - degree;
        let h = (r_max - r_min) / cells as f64;
        let mut knots = Vec::with_capacity(dim + degree + 1);
        knots.extend(std::iter::repeat(r_min).take(degree + 1));
        knots.extend((1..cells).map(|k| r_min + k as f64 * h));
        knots.extend(std::iter::repeat(r_max).take(degree + 1));
        Ok(BSplineBasis { degree, dim, r_min, r_max, cells, h, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> (f64, f64) {
        (self.r_min, self.r_max)
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn cell_width(&self) -> f64 {
        self.h
    }

    /// Full knot vector including the repeated end knots.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Cell boundaries `r_min = k_0 < ... < k_K = r_max`.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.knots[self.degree..=self.degree + self.cells].to_vec()
    }

    /// Cell index and local coordinate `u` in `[0, 1]`, or `None` outside the support.
    #[inline]
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !(x >= self.r_min && x <= self.r_max) {
            return None;
        }
        let p = self.degree;
        let last = self.cells - 1;
        let mut c = (((x - self.r_min) / self.h) as usize).min(last);
        while c > 0 && x < self.knots[c + p] {
            c -= 1;
        }
        while c < last && x >= self.knots[c + p + 1] {
            c += 1;
        }
        let left = self.knots[c + p];
        Some((c, ((x - left) / self.h).clamp(0.0, 1.0)))
    }

    /// Nonzero basis values at `x`: writes `p + 1` values into `out` and returns
    /// the index of the first one, or `None` outside the support.
    #[inline]
    pub fn eval_nonzero(&self, x: f64, out: &mut [f64; MAX_DEGREE + 1]) -> Option<usize> {
        let (c, _) = self.locate(x)?;
        self.eval_in_cell(c, x, out);
        Some(c)
    }

    /// Triangular Cox–de Boor evaluation on the knot span of cell `c`.
    #[inline]
    fn eval_in_cell(&self, c: usize, x: f64, out: &mut [f64; MAX_DEGREE + 1]) {
        let p = self.degree;
        let span = c + p;
        let u = &self.knots;
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// All `n` basis values at `x`; zero vector and `in_support = false` outside.
    pub fn eval(&self, x: f64) -> BasisValues {
        let mut values = vec![0.0; self.dim];
        let mut nz = [0.0; MAX_DEGREE + 1];
        match self.eval_nonzero(x, &mut nz) {
            Some(first) => {
                values[first..=first + self.degree].copy_from_slice(&nz[..=self.degree]);
                BasisValues { values, in_support: true }
            }
            None => BasisValues { values, in_support: false },
        }
    }

    /// Nonzero derivatives of orders `0..=order` at `x`: `out[k][a]` is the
    /// `k`-th derivative of basis `first + a`.
    pub fn eval_nonzero_derivatives(
        &self,
        x: f64,
        order: usize,
        out: &mut [[f64; MAX_DEGREE + 1]; 3],
    ) -> Result<Option<usize>> {
        if order > self.degree || order > 2 {
            return Err(Error::UnsupportedOrder { order, degree: self.degree });
        }
        let Some((c, _)) = self.locate(x) else {
            return Ok(None);
        };
        let p = self.degree;
        let span = c + p;
        let u = &self.knots;
        // ndu: basis values (upper triangle incl. diagonal) and knot differences (lower)
        let mut ndu = [[0.0; MAX_DEGREE + 1]; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        for j in 0..=p {
            out[0][j] = ndu[j][p];
        }
        let mut a = [[0.0; MAX_DEGREE + 1]; 2];
        for r in 0..=p as isize {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0] = [0.0; MAX_DEGREE + 1];
            a[1] = [0.0; MAX_DEGREE + 1];
            a[0][0] = 1.0;
            for k in 1..=order as isize {
                let mut d = 0.0;
                let rk = r - k;
                let pk = p as isize - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { -rk };
                let j2 = if r - 1 <= pk { k - 1 } else { p as isize - r };
                for j in j1..=j2 {
                    a[s2][j as usize] = (a[s1][j as usize] - a[s1][(j - 1) as usize])
                        / ndu[(pk + 1) as usize][(rk + j) as usize];
                    d += a[s2][j as usize] * ndu[(rk + j) as usize][pk as usize];
                }
                if r <= pk {
                    a[s2][k as usize] = -a[s1][(k - 1) as usize] / ndu[(pk + 1) as usize][r as usize];
                    d += a[s2][k as usize] * ndu[r as usize][pk as usize];
                }
                out[k as usize][r as usize] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=order {
            for j in 0..=p {
                out[k][j] *= factor;
            }
            factor *= (p - k) as f64;
        }
        Ok(Some(c))
    }

    /// Exact `order`-th derivative of every basis function at `x` (zero outside).
    pub fn eval_derivatives(&self, x: f64, order: usize) -> Result<Vec<f64>> {
        if order == 0 || order > 2 {
            return Err(Error::UnsupportedOrder { order, degree: self.degree });
        }
        let mut ders = [[0.0; MAX_DEGREE + 1]; 3];
        let mut out = vec![0.0; self.dim];
        if let Some(first) = self.eval_nonzero_derivatives(x, order, &mut ders)? {
            out[first..=first + self.degree].copy_from_slice(&ders[order][..=self.degree]);
        }
        Ok(out)
    }

    /// Polynomial pieces: `pieces[c][a][k]` is the coefficient of `u^k` of basis
    /// `c + a` on cell `c`, with `u = (x - left(c)) / h`.
    pub fn cell_polynomials(&self) -> Vec<[[f64; MAX_DEGREE + 1]; MAX_DEGREE + 1]> {
        let p = self.degree;
        let q = p + 1;
        let nodes: Vec<f64> = (0..q).map(|k| (k as f64 + 0.5) / q as f64).collect();
        let vander = DMatrix::from_fn(q, q, |r, k| nodes[r].powi(k as i32));
        let lu = vander.lu();
        (0..self.cells)
            .map(|c| {
                let left = self.knots[c + p];
                let mut vals = DMatrix::zeros(q, q);
                let mut nz = [0.0; MAX_DEGREE + 1];
                for (r, &u) in nodes.iter().enumerate() {
                    self.eval_in_cell(c, left + u * self.h, &mut nz);
                    for a in 0..q {
                        vals[(r, a)] = nz[a];
                    }
                }
                let coef = lu.solve(&vals).expect("Vandermonde on distinct nodes is invertible");
                let mut piece = [[0.0; MAX_DEGREE + 1]; MAX_DEGREE + 1];
                for a in 0..q {
                    for k in 0..q {
                        piece[a][k] = coef[(k, a)];
                    }
                }
                piece
            })
            .collect()
    }

    /// Distinct knots together with all cell midpoints, sorted.
    pub fn knots_and_midpoints(&self) -> Vec<f64> {
        let bp = self.breakpoints();
        let mut pts = Vec::with_capacity(2 * bp.len());
        for w in bp.windows(2) {
            pts.push(w[0]);
            pts.push(0.5 * (w[0] + w[1]));
        }
        pts.push(*bp.last().unwrap());
        pts
    }

    /// Matrix of basis values at the given points (rows = points).
    pub fn design_matrix(&self, points: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(points.len(), self.dim);
        let mut nz = [0.0; MAX_DEGREE + 1];
        for (r, &x) in points.iter().enumerate() {
            if let Some(first) = self.eval_nonzero(x, &mut nz) {
                for a in 0..=self.degree {
                    m[(r, first + a)] = nz[a];
                }
            }
        }
        m
    }
}

/// The hypothesis space: a basis plus pointwise bounds `y_min <= f <= y_max`
/// enforced at the constraint points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineSpace {
    pub basis: BSplineBasis,
    pub y_min: f64,
    pub y_max: f64,
    pub constraint_points: Vec<f64>,
}

impl BSplineSpace {
    pub fn new(basis: BSplineBasis, y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_min <= y_max) {
            return validation(format!("bounds must satisfy y_min <= y_max, got [{y_min}, {y_max}]"));
        }
        let constraint_points = basis.knots_and_midpoints();
        Ok(BSplineSpace { basis, y_min, y_max, constraint_points })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn degree(&self) -> usize {
        self.basis.degree()
    }

    /// Rows are the basis values at each constraint point.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        self.basis.design_matrix(&self.constraint_points)
    }

    /// Largest bound violation of `c` over the constraint points (0 if feasible).
    pub fn max_violation(&self, c: &DVector<f64>) -> f64 {
        let vals = self.constraint_matrix() * c;
        vals.iter().fold(0.0f64, |acc, &v| acc.max(self.y_min - v).max(v - self.y_max))
    }

    pub fn is_feasible(&self, c: &DVector<f64>, tol: f64) -> bool {
        self.max_violation(c) <= tol
    }

    pub fn function(&self, coefficients: DVector<f64>) -> Result<SplineFunction> {
        SplineFunction::new(self.basis.clone(), coefficients)
    }
}

/// Build the hypothesis space of given degree and dimension on `[r_min, r_max]`,
/// with bounds taken from the global extrema of the observations.
pub fn build_hypothesis_space(
    degree: usize,
    dim: usize,
    r_min: f64,
    r_max: f64,
    y: &TrajectoryEnsemble,
) -> Result<BSplineSpace> {
    if dim == 0 {
        return validation("hypothesis space dimension must be at least 1");
    }
    let basis = BSplineBasis::new(degree, dim, r_min, r_max)?;
    let (y_min, y_max) = y.min_max();
    BSplineSpace::new(basis, y_min, y_max)
}

/// `sum_i c_i phi_i`; evaluates to 0 outside the basis support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFunction {
    pub basis: BSplineBasis,
    pub coefficients: DVector<f64>,
}

impl SplineFunction {
    pub fn new(basis: BSplineBasis, coefficients: DVector<f64>) -> Result<Self> {
        if coefficients.len() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), got: coefficients.len() });
        }
        Ok(SplineFunction { basis, coefficients })
    }

    /// Value and in-support flag.
    #[inline]
    pub fn eval_flagged(&self, x: f64) -> (f64, bool) {
        let mut nz = [0.0; MAX_DEGREE + 1];
        match self.basis.eval_nonzero(x, &mut nz) {
            Some(first) => {
                let v = (0..=self.basis.degree()).map(|a| nz[a] * self.coefficients[first + a]).sum();
                (v, true)
            }
            None => (0.0, false),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_flagged(x).0
    }
}
