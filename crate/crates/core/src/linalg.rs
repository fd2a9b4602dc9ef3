//! Dense and banded helpers shared by the Gaussian, forward and reduction code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for every numerical-rank decision.
pub const RANK_TOL: f64 = 1e-12;

/// Jitter schedule (relative to `trace / n`) for kernel covariance factorizations.
pub const KERNEL_JITTER: [f64; 2] = [1e-12, 1e-9];

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn all_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub(crate) fn check_finite_matrix(a: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if all_finite(a) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn check_finite_vector(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Cholesky of a kernel covariance with a small diagonal jitter.
///
/// The first attempt adds `1e-12 * trace / n` to the diagonal; on failure one
/// retry with `1e-9 * trace / n` is made.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch {
            context: "cholesky_jittered",
            expected: n,
            found: a.ncols(),
        });
    }
    let sym = symmetrize(a);
    let scale = sym.trace() / n.max(1) as f64;
    for eps in KERNEL_JITTER {
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += eps * scale;
        }
        if let Some(chol) = shifted.cholesky() {
            return Ok(chol);
        }
    }
    Err(Error::NotPositiveDefinite("kernel covariance"))
}

/// Cholesky that also rejects numerically singular input: every squared pivot
/// must exceed `n · ε · max diag(a)`.
pub fn cholesky_strict(a: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let sym = symmetrize(a);
    let max_diag = (0..n).map(|i| sym[(i, i)]).fold(0.0_f64, f64::max);
    let chol = sym.cholesky().ok_or(Error::NotPositiveDefinite(what))?;
    let floor = n as f64 * f64::EPSILON * max_diag;
    let l = chol.l_dirty();
    if (0..n).any(|i| !(l[(i, i)] * l[(i, i)] > floor)) {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(chol)
}

/// A square-root factor `S` with `S Sᵀ = a` for a symmetric PSD matrix.
///
/// Uses Cholesky when it succeeds and otherwise falls back to the eigen
/// decomposition with negative round-off eigenvalues clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite_matrix(a, "covariance")?;
    let sym = symmetrize(a);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.unpack());
    }
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = -1e-10 * max.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&v| v < floor) {
        return Err(Error::NotPositiveDefinite("covariance (indefinite)"));
    }
    let mut s = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let root = lam.max(0.0).sqrt();
        s.column_mut(j).scale_mut(root);
    }
    Ok(s)
}

/// Flip each column so its largest-magnitude entry is positive (first index wins ties).
/// Returns the applied signs so paired factors can be flipped consistently.
pub fn align_column_signs(m: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in m.column(j).iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        let sign = if m[(best, j)] < 0.0 { -1.0 } else { 1.0 };
        if sign < 0.0 {
            m.column_mut(j).neg_mut();
        }
        signs.push(sign);
    }
    signs
}

/// Thin SVD with singular values in descending order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// Right singular vectors as columns.
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        check_finite_matrix(a, "svd input")?;
        let (rows, cols) = a.shape();
        let k = rows.min(cols);
        if k == 0 {
            return Ok(ThinSvd {
                u: DMatrix::zeros(rows, 0),
                singular_values: DVector::zeros(0),
                v: DMatrix::zeros(cols, 0),
            });
        }
        let svd = a.clone().svd(true, true);
        let u = svd.u.ok_or(Error::NonFinite("svd left vectors"))?;
        let v_t = svd.v_t.ok_or(Error::NonFinite("svd right vectors"))?;
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let singular_values = DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
        let u = DMatrix::from_fn(rows, k, |r, c| u[(r, order[c])]);
        let v = DMatrix::from_fn(cols, k, |r, c| v_t[(order[c], r)]);
        Ok(ThinSvd { u, singular_values, v })
    }

    /// Count of singular values at or above `RANK_TOL * σ₁`.
    pub fn numerical_rank(&self) -> usize {
        numerical_rank(self.singular_values.as_slice())
    }

    /// Apply the sign convention to the right vectors, flipping the left ones to match.
    pub fn align_by_right(&mut self) {
        let signs = align_column_signs(&mut self.v);
        for (j, s) in signs.into_iter().enumerate() {
            if s < 0.0 {
                self.u.column_mut(j).neg_mut();
            }
        }
    }

    /// Apply the sign convention to the left vectors, flipping the right ones to match.
    pub fn align_by_left(&mut self) {
        let signs = align_column_signs(&mut self.u);
        for (j, s) in signs.into_iter().enumerate() {
            if s < 0.0 {
                self.v.column_mut(j).neg_mut();
            }
        }
    }
}

pub fn numerical_rank(descending: &[f64]) -> usize {
    match descending.first() {
        Some(&s1) if s1 > 0.0 => descending.iter().take_while(|&&s| s >= RANK_TOL * s1).count(),
        _ => 0,
    }
}

/// Cholesky factor of a symmetric banded matrix.
///
/// The semi-bandwidth is detected from the nonzero pattern, so a dense SPD
/// matrix is handled too (bandwidth `n - 1`). Storage is row-major over the
/// lower band.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch {
                context: "band cholesky",
                expected: n,
                found: a.ncols(),
            });
        }
        check_finite_matrix(a, "stiffness")?;
        let bw = semi_bandwidth(a);
        let width = bw + 1;
        let mut band = vec![0.0; n * width];
        let idx = |i: usize, j: usize| i * width + (j + bw - i);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                // lower triangle only; symmetric input is assumed
                let mut sum = a[(i, j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    sum -= band[idx(i, k)] * band[idx(j, k)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(Error::Singular {
                            context: "stiffness matrix",
                            rank: i,
                        });
                    }
                    band[idx(i, i)] = sum.sqrt();
                } else {
                    band[idx(i, j)] = sum / band[idx(j, j)];
                }
            }
        }
        Ok(BandCholesky { n, bw, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.bw + 1) + (j + self.bw - i)]
    }

    /// Smallest diagonal entry of the factor (square root of the smallest pivot).
    pub fn min_pivot(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).fold(f64::INFINITY, f64::min)
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut sum = x[i];
            for k in i.saturating_sub(self.bw)..i {
                sum -= self.at(i, k) * x[k];
            }
            x[i] = sum / self.at(i, i);
        }
        for i in (0..n).rev() {
            let mut sum = x[i];
            for k in (i + 1)..n.min(i + self.bw + 1) {
                sum -= self.at(k, i) * x[k];
            }
            x[i] = sum / self.at(i, i);
        }
    }
}

fn semi_bandwidth(a: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut bw = 0;
    for j in 0..n {
        for i in (j + 1)..n {
            if a[(i, j)] != 0.0 || a[(j, i)] != 0.0 {
                bw = bw.max(i - j);
            }
        }
    }
    bw
}

/// Neumaier-compensated sum in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
