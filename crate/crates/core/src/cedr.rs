//! Cross-validating estimation of the dimension range: split-sample spectral
//! analysis of the quadratic normal system.

use crate::bspline::{BSplineBasis, MAX_DEGREE};
use crate::error::{validation, Error, Result};
use crate::linalg::symmetrize;
use crate::moments::{average_outer, ObservationStats};
use crate::state_model::TrajectoryEnsemble;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Paths per accumulation chunk; fixed so sums do not depend on the thread count.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedrConfig {
    pub n_max: usize,
    /// Eigenvalues below this fraction of the largest are dropped.
    pub drop_tol: f64,
    /// Eigenvalues above this fraction of the largest, and above the sampling
    /// floor `n / M'`, count towards the rank.
    pub rank_tol: f64,
}

impl Default for CedrConfig {
    fn default() -> Self {
        CedrConfig { n_max: 100, drop_tol: 1e-12, rank_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedrRecord {
    pub n: usize,
    pub sigma: Vec<f64>,
    pub ratios: Vec<f64>,
    pub g: f64,
    pub rank: usize,
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedrReport {
    pub degree: usize,
    pub tau: f64,
    pub records: Vec<CedrRecord>,
    /// Last dimension before the first exceedance of `tau`.
    pub n_selected: usize,
    /// Largest evaluated dimension with `g <= tau`.
    pub n_last_below: usize,
    /// The scan stopped at `n_max` without exceeding `tau`.
    pub capped: bool,
}

impl CedrReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("degree,n,g,tau,rank,sigma_min,regularized\n");
        for r in &self.records {
            let smin = r.sigma.last().copied().unwrap_or(0.0);
            s.push_str(&format!(
                "{},{},{:e},{:e},{},{:e},{}\n",
                self.degree, r.n, r.g, self.tau, r.rank, smin, r.regularized
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedEigen {
    /// Nonincreasing retained eigenvalues.
    pub values: Vec<f64>,
    /// Columns are the `B`-orthonormal eigenvectors.
    pub vectors: DMatrix<f64>,
    pub regularized: bool,
}

/// Solve `A u = sigma B u` with `u_i^T B u_j = delta_ij`, dropping eigenvalues
/// below `drop_tol * sigma_1`.
pub fn generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>, drop_tol: f64) -> Result<GeneralizedEigen> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.nrows() });
    }
    let bs = symmetrize(b);
    let mut regularized = false;
    let chol = match bs.clone().cholesky() {
        Some(c) => c,
        None => {
            regularized = true;
            let eps = 1e-12 * bs.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
            let reg = &bs + DMatrix::identity(n, n) * eps;
            reg.cholesky().ok_or_else(|| Error::Numerical("Gram matrix is not positive semi-definite".into()))?
        }
    };
    let l = chol.l();
    let linv_a = l.solve_lower_triangular(&symmetrize(a)).ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let eig = symmetrize(&c).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvalues[order[0]];
    let keep: Vec<usize> = order.into_iter().filter(|&k| top > 0.0 && eig.eigenvalues[k] > drop_tol * top).collect();
    let lt = l.transpose();
    let mut vectors = DMatrix::zeros(n, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        let w = eig.eigenvectors.column(k).into_owned();
        let u = lt.solve_upper_triangular(&w).ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        vectors.set_column(j, &u);
    }
    Ok(GeneralizedEigen { values: keep.iter().map(|&k| eig.eigenvalues[k]).collect(), vectors, regularized })
}

/// Per-time half-sample means of the observations, `l = 1..=L`.
fn half_means(y: &TrajectoryEnsemble) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = y.n_paths();
    if m < 2 {
        return validation("splitting the data needs at least two trajectories");
    }
    let half = m / 2;
    let steps = y.steps();
    let mut first = vec![0.0; steps];
    let mut second = vec![0.0; steps];
    for (k, path) in y.paths().enumerate() {
        let target = if k < half { &mut first } else { &mut second };
        for l in 1..=steps {
            target[l - 1] += path[l];
        }
    }
    first.iter_mut().for_each(|v| *v /= half as f64);
    second.iter_mut().for_each(|v| *v /= (m - half) as f64);
    Ok((first, second))
}

/// Copies `b`, `b'` of the normal vector from the two halves of the data.
pub fn split_moment_vectors(y: &TrajectoryEnsemble, mean_phi: &[DVector<f64>]) -> Result<(DVector<f64>, DVector<f64>)> {
    if mean_phi.len() != y.steps() {
        return Err(Error::DimensionMismatch { expected: y.steps(), got: mean_phi.len() });
    }
    let (h1, h2) = half_means(y)?;
    Ok(split_from_halves(&h1, &h2, mean_phi))
}

fn split_from_halves(h1: &[f64], h2: &[f64], mean_phi: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = mean_phi[0].len();
    let (mut b, mut bp) = (DVector::zeros(n), DVector::zeros(n));
    for (l, v) in mean_phi.iter().enumerate() {
        b.axpy(h1[l], v, 1.0);
        bp.axpy(h2[l], v, 1.0);
    }
    let steps = mean_phi.len() as f64;
    (b / steps, bp / steps)
}

/// Power sums of the local cell coordinate over the state ensemble.
struct CellSums {
    cells: usize,
    steps: usize,
    n_paths: usize,
    /// `[l][c][k]`: sum of `u^k`, `k <= 3`, at time `t_{l+1}`.
    per_time: Vec<f64>,
    /// `[c][k]`: sum over all `l >= 1` of `u^k`, `k <= 6`.
    total: Vec<f64>,
}

const PT: usize = MAX_DEGREE + 1;
const TT: usize = 2 * MAX_DEGREE + 1;

impl CellSums {
    fn new(x: &TrajectoryEnsemble, r_min: f64, r_max: f64, cells: usize) -> Result<Self> {
        let locator = BSplineBasis::new(0, cells, r_min, r_max)?;
        let steps = x.steps();
        let width = x.grid.len();
        let partial: Vec<(Vec<f64>, Vec<f64>)> = x
            .values()
            .par_chunks(CHUNK * width)
            .map(|chunk| {
                let mut per_time = vec![0.0; steps * cells * PT];
                let mut total = vec![0.0; cells * TT];
                for path in chunk.chunks_exact(width) {
                    for l in 1..=steps {
                        let Some((c, u)) = locator.locate(path[l]) else { continue };
                        let mut pw = 1.0;
                        let base = ((l - 1) * cells + c) * PT;
                        for k in 0..TT {
                            if k < PT {
                                per_time[base + k] += pw;
                            }
                            total[c * TT + k] += pw;
                            pw *= u;
                        }
                    }
                }
                (per_time, total)
            })
            .collect();
        let mut per_time = vec![0.0; steps * cells * PT];
        let mut total = vec![0.0; cells * TT];
        for (p, t) in partial {
            per_time.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            total.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
        }
        Ok(CellSums { cells, steps, n_paths: x.n_paths(), per_time, total })
    }

    /// Per-time basis means and the `L^2(rho)` Gram matrix for `basis`.
    fn moments(&self, basis: &BSplineBasis) -> (Vec<DVector<f64>>, DMatrix<f64>) {
        debug_assert_eq!(basis.cells(), self.cells);
        let p = basis.degree();
        let n = basis.dim();
        let pieces = basis.cell_polynomials();
        let inv_m = 1.0 / self.n_paths as f64;
        let mean_phi = (0..self.steps)
            .map(|l| {
                let mut v = DVector::zeros(n);
                for (c, piece) in pieces.iter().enumerate() {
                    let s = &self.per_time[(l * self.cells + c) * PT..][..PT];
                    for a in 0..=p {
                        v[c + a] += (0..=p).map(|k| piece[a][k] * s[k]).sum::<f64>();
                    }
                }
                v * inv_m
            })
            .collect();
        let mut gram = DMatrix::zeros(n, n);
        let norm = inv_m / self.steps as f64;
        for (c, piece) in pieces.iter().enumerate() {
            let s = &self.total[c * TT..][..TT];
            for a in 0..=p {
                for b in 0..=p {
                    let mut acc = 0.0;
                    for j in 0..=p {
                        for k in 0..=p {
                            acc += piece[a][j] * piece[b][k] * s[j + k];
                        }
                    }
                    gram[(c + a, c + b)] += acc * norm;
                }
            }
        }
        (mean_phi, gram)
    }
}

fn record_for(
    n: usize,
    mean_phi: &[DVector<f64>],
    gram: &DMatrix<f64>,
    halves: &(Vec<f64>, Vec<f64>),
    n_paths: usize,
    cfg: &CedrConfig,
) -> Result<CedrRecord> {
    let a1 = average_outer(mean_phi);
    let (b, bp) = split_from_halves(&halves.0, &halves.1, mean_phi);
    let ge = generalized_eigen(&a1, gram, cfg.drop_tol)?;
    let diff = b - bp;
    let ratios: Vec<f64> =
        ge.values.iter().enumerate().map(|(i, s)| ge.vectors.column(i).dot(&diff).abs() / s).collect();
    let g = ratios.iter().map(|r| r * r).sum();
    let top = ge.values.first().copied().unwrap_or(0.0);
    // eigenvalues at the Monte Carlo floor n / M' of the state means do not count
    let floor = (cfg.rank_tol * top).max(n as f64 / n_paths as f64);
    let rank = ge.values.iter().filter(|&&s| s > floor).count();
    Ok(CedrRecord { n, sigma: ge.values, ratios, g, rank, regularized: ge.regularized })
}

/// Scan dimensions for several degrees at once, sharing the cell power sums.
///
/// The support is that of the state ensemble `xprime`.
pub fn dimension_ranges(
    xprime: &TrajectoryEnsemble,
    y: &TrajectoryEnsemble,
    degrees: &[usize],
    cfg: &CedrConfig,
) -> Result<Vec<CedrReport>> {
    if xprime.steps() != y.steps() {
        return validation("state and observation ensembles have different time grids");
    }
    if degrees.iter().any(|&p| p > MAX_DEGREE) {
        return validation(format!("degrees must not exceed {MAX_DEGREE}"));
    }
    let (r_min, r_max) = xprime.min_max();
    if !(r_min < r_max) {
        return validation("state ensemble has degenerate support");
    }
    let tau = ObservationStats::from_ensemble(y)?.energy();
    let halves = half_means(y)?;
    let mut reports: Vec<CedrReport> = degrees
        .iter()
        .map(|&degree| CedrReport { degree, tau, records: vec![], n_selected: 0, n_last_below: 0, capped: false })
        .collect();
    let mut active: Vec<bool> = degrees.iter().map(|&p| p + 1 <= cfg.n_max).collect();
    let mut cells = 1;
    while active.iter().any(|&a| a) {
        let sums = CellSums::new(xprime, r_min, r_max, cells)?;
        for (k, report) in reports.iter_mut().enumerate() {
            if !active[k] {
                continue;
            }
            let n = cells + report.degree;
            let basis = BSplineBasis::new(report.degree, n, r_min, r_max)?;
            let (mean_phi, gram) = sums.moments(&basis);
            let rec = record_for(n, &mean_phi, &gram, &halves, xprime.n_paths(), cfg)?;
            let below = rec.g <= tau;
            report.records.push(rec);
            if below {
                report.n_selected = n;
                report.n_last_below = n;
                if n >= cfg.n_max {
                    report.capped = true;
                    active[k] = false;
                }
            } else {
                if report.n_selected == 0 {
                    log::warn!("degree {}: split-sample error exceeds the threshold at n = {n}", report.degree);
                    report.n_selected = n;
                }
                active[k] = false;
            }
        }
        cells += 1;
    }
    Ok(reports)
}

/// Scan dimensions `n = degree + 1, ...` until the split-sample error exceeds
/// the data energy.
pub fn dimension_range(
    xprime: &TrajectoryEnsemble,
    y: &TrajectoryEnsemble,
    degree: usize,
    cfg: &CedrConfig,
) -> Result<CedrReport> {
    Ok(dimension_ranges(xprime, y, &[degree], cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{assemble_state_moments, mean_phi};
    use crate::observation::{observe_ensemble, NoiseModel, ObservationFunction};
    use crate::state_model::{simulate_ensemble, InitialDistribution, StateModelSpec, TimeGrid};

    fn dw(m: usize, seed: u64) -> TrajectoryEnsemble {
        simulate_ensemble(
            &StateModelSpec::double_well(),
            &InitialDistribution::double_well_default(),
            TimeGrid::new(0.01, 50).unwrap(),
            m,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identity_gram_is_plain_eigen() {
        let g = DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).cos());
        let a = &g * g.transpose();
        let ge = generalized_eigen(&a, &DMatrix::identity(4, 4), 1e-12).unwrap();
        let mut plain: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        plain.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in ge.values.iter().zip(&plain) {
            assert!((x - y).abs() < 1e-10 * plain[0]);
        }
    }

    #[test]
    fn defining_equation_and_normalisation() {
        let g = DMatrix::from_fn(5, 5, |i, j| ((i * 3 + j) as f64 * 0.4).sin());
        let a = &g * g.transpose();
        let h = DMatrix::from_fn(5, 5, |i, j| ((i + j * 5) as f64 * 0.9).cos());
        let b = &h * h.transpose() + DMatrix::identity(5, 5);
        let ge = generalized_eigen(&a, &b, 1e-12).unwrap();
        let u = &ge.vectors;
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(ge.values.clone()));
        let resid = (&a * u - &b * u * sigma).norm() / a.norm();
        assert!(resid <= 1e-10, "{resid}");
        let gram = u.transpose() * &b * u;
        assert!((gram - DMatrix::identity(u.ncols(), u.ncols())).amax() < 1e-10);
        for w in ge.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rank_one_keeps_one_eigenvalue() {
        let v = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let a = &v * v.transpose();
        let ge = generalized_eigen(&a, &DMatrix::identity(3, 3), 1e-12).unwrap();
        assert_eq!(ge.values.len(), 1);
    }

    #[test]
    fn singular_gram_is_regularised() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(generalized_eigen(&a, &b, 1e-12).unwrap().regularized);
    }

    #[test]
    fn split_vectors() {
        let x = dw(400, 1);
        let (lo, hi) = x.min_max();
        let basis = BSplineBasis::new(1, 6, lo, hi).unwrap();
        let mp = mean_phi(&x, &basis);
        let y = observe_ensemble(&x, &ObservationFunction::Sine, &NoiseModel::None, 0).unwrap();
        let (b, bp) = split_moment_vectors(&y, &mp).unwrap();
        let state = assemble_state_moments(&x, &basis, None).unwrap();
        let sys =
            crate::moments::MomentSystem::assemble(&state, &ObservationStats::from_ensemble(&y).unwrap(), &NoiseModel::None)
                .unwrap();
        assert!(((&b + &bp) - &sys.b1bar * 2.0).amax() < 1e-12);
        // identical paths in both halves
        let one = y.subset(0..1).unwrap();
        let mut vals = Vec::new();
        for _ in 0..10 {
            vals.extend_from_slice(one.values());
        }
        let same = TrajectoryEnsemble::from_values(y.grid, 0, vals).unwrap();
        let (b, bp) = split_moment_vectors(&same, &mp).unwrap();
        assert_eq!(b, bp);
        assert!(split_moment_vectors(&one, &mp).is_err());
    }

    #[test]
    fn cell_sums_match_direct_assembly() {
        let x = dw(300, 2);
        let (lo, hi) = x.min_max();
        for degree in 0..=3 {
            let basis = BSplineBasis::new(degree, 7 + degree, lo, hi).unwrap();
            let sums = CellSums::new(&x, lo, hi, 7).unwrap();
            let (mp, gram) = sums.moments(&basis);
            let direct = mean_phi(&x, &basis);
            for (a, b) in mp.iter().zip(&direct) {
                assert!((a - b).amax() < 1e-10);
            }
            let state = assemble_state_moments(&x, &basis, None).unwrap();
            let mut avg = DMatrix::zeros(basis.dim(), basis.dim());
            for a2 in &state.a2 {
                avg += a2;
            }
            avg /= state.a2.len() as f64;
            assert!((gram - avg).amax() < 1e-10);
        }
    }

    #[test]
    fn deterministic_data_runs_to_cap() {
        let x = dw(300, 3);
        let one = x.subset(0..1).unwrap();
        let mut vals = Vec::new();
        for _ in 0..50 {
            vals.extend_from_slice(one.values());
        }
        let y = TrajectoryEnsemble::from_values(x.grid, 0, vals).unwrap().map(|v| v.sin());
        let cfg = CedrConfig { n_max: 12, ..Default::default() };
        let rep = dimension_range(&x, &y, 1, &cfg).unwrap();
        assert!(rep.records.iter().all(|r| r.g == 0.0));
        assert_eq!(rep.n_selected, 12);
        assert!(rep.capped);
    }

    #[test]
    fn tau_of_unit_data_and_scale_invariance() {
        let x = dw(500, 4);
        let ones = x.map(|_| 1.0);
        let rep = dimension_range(&x, &ones, 0, &CedrConfig { n_max: 3, ..Default::default() }).unwrap();
        assert_eq!(rep.tau, 1.0);
        let xd = dw(500, 5);
        let y = observe_ensemble(&xd, &ObservationFunction::Sine, &NoiseModel::None, 0).unwrap();
        let cfg = CedrConfig { n_max: 20, ..Default::default() };
        let a = dimension_range(&x, &y, 1, &cfg).unwrap();
        let b = dimension_range(&x, &y.map(|v| 3.0 * v), 1, &cfg).unwrap();
        assert!((b.tau - 9.0 * a.tau).abs() < 1e-12 * b.tau);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert!((rb.g - 9.0 * ra.g).abs() <= 1e-8 * rb.g.max(1e-300));
            // partial sums of squared ratios are nondecreasing
            let mut acc = 0.0;
            for r in &ra.ratios {
                let next = acc + r * r;
                assert!(next >= acc);
                acc = next;
            }
        }
        assert_eq!(a.n_selected, b.n_selected);
    }
}
