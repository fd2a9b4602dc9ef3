//! Gaussian beliefs held through square-root factors, the linear-Gaussian
//! conjugate update, and the Förstner distance between covariances.
//!
//! Precisions are never formed: a belief is `N(mean, S Sᵀ)` with `S` of shape
//! `d × k`, and `k < d` is how singular priors are represented.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{check_finite_matrix, cholesky_strict, check_finite_vector, psd_sqrt, symmetrize};
use crate::trace::OpTrace;

/// Default relative threshold for shared-null-space filtering in [`foerstner_distance`].
pub const DEFAULT_NULL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    sqrt_factor: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, sqrt_factor: DMatrix<f64>) -> Result<Self> {
        if sqrt_factor.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "belief sqrt factor rows",
                expected: mean.len(),
                found: sqrt_factor.nrows(),
            });
        }
        check_finite_vector(&mean, "belief mean")?;
        check_finite_matrix(&sqrt_factor, "belief sqrt factor")?;
        Ok(GaussianBelief { mean, sqrt_factor })
    }

    /// Builds a belief from a dense covariance (Cholesky, or a clamped eigen
    /// square root when the covariance is singular).
    pub fn from_covariance(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "belief covariance",
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let s = psd_sqrt(covariance)?;
        GaussianBelief::new(mean, s)
    }

    /// Zero-mean `N(0, variance · I)`.
    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "isotropic variance must be finite and non-negative, got {variance}"
            )));
        }
        GaussianBelief::new(
            DVector::zeros(dim),
            DMatrix::identity(dim, dim) * variance.sqrt(),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of columns of the square-root factor (an upper bound on the rank).
    pub fn factor_width(&self) -> usize {
        self.sqrt_factor.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn sqrt_factor(&self) -> &DMatrix<f64> {
        &self.sqrt_factor
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.sqrt_factor * self.sqrt_factor.transpose()
    }

    pub fn covariance_submatrix(&self, rows: &[usize]) -> DMatrix<f64> {
        let s = self.sqrt_factor.select_rows(rows);
        &s * s.transpose()
    }

    /// `mean + S ξ` with `ξ ~ N(0, I_k)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.sqrt_factor.ncols();
        let xi = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + &self.sqrt_factor * xi
    }
}

/// Covariance represented as `Γ − B Bᵀ` on top of a base belief.
#[derive(Debug, Clone)]
pub struct LowRankDowndate {
    base: Arc<GaussianBelief>,
    factor: DMatrix<f64>,
}

impl LowRankDowndate {
    pub fn new(base: Arc<GaussianBelief>, factor: DMatrix<f64>) -> Result<Self> {
        if factor.nrows() != base.dim() {
            return Err(Error::DimensionMismatch {
                context: "downdate factor rows",
                expected: base.dim(),
                found: factor.nrows(),
            });
        }
        check_finite_matrix(&factor, "downdate factor")?;
        Ok(LowRankDowndate { base, factor })
    }

    pub fn base(&self) -> &Arc<GaussianBelief> {
        &self.base
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.base.covariance() - &self.factor * self.factor.transpose()
    }

    /// Principal submatrix of `Γ − B Bᵀ` on the given rows/columns.
    pub fn covariance_submatrix(&self, rows: &[usize]) -> DMatrix<f64> {
        let b = self.factor.select_rows(rows);
        self.base.covariance_submatrix(rows) - &b * b.transpose()
    }

    /// The downdate `B Bᵀ` itself.
    pub fn reduction(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

/// Precomputed linear-Gaussian update for a fixed prior, forward operator and noise.
///
/// Everything that does not depend on the data is assembled once: the gain
/// `Γ Gᵀ`, the Cholesky factor of `G Γ Gᵀ + Γ_obs` and the downdate factor
/// `B = Γ Gᵀ L⁻ᵀ`. Each data vector then costs one `m × m` triangular solve
/// pair plus a `d × m` product.
#[derive(Debug, Clone)]
pub struct ConjugateUpdate {
    prior: Arc<GaussianBelief>,
    predicted_mean: DVector<f64>,
    gain: DMatrix<f64>,
    innovation: Cholesky<f64, Dyn>,
    downdate: Arc<LowRankDowndate>,
}

impl ConjugateUpdate {
    pub fn new(prior: Arc<GaussianBelief>, forward: &DMatrix<f64>, noise: &GaussianBelief) -> Result<Self> {
        if forward.ncols() != prior.dim() {
            return Err(Error::DimensionMismatch {
                context: "forward operator columns vs prior dimension",
                expected: prior.dim(),
                found: forward.ncols(),
            });
        }
        if forward.nrows() != noise.dim() {
            return Err(Error::DimensionMismatch {
                context: "forward operator rows vs noise dimension",
                expected: noise.dim(),
                found: forward.nrows(),
            });
        }
        check_finite_matrix(forward, "forward operator")?;

        let gs = forward * prior.sqrt_factor();
        let h = symmetrize(&(&gs * gs.transpose() + noise.covariance()));
        let innovation = cholesky_strict(&h, "innovation covariance")?;
        let gain = prior.sqrt_factor() * gs.transpose();
        let bt = innovation
            .l_dirty()
            .solve_lower_triangular(&gain.transpose())
            .ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
        let downdate = Arc::new(LowRankDowndate::new(prior.clone(), bt.transpose())?);
        let predicted_mean = forward * prior.mean() + noise.mean();
        Ok(ConjugateUpdate {
            prior,
            predicted_mean,
            gain,
            innovation,
            downdate,
        })
    }

    pub fn prior(&self) -> &Arc<GaussianBelief> {
        &self.prior
    }

    pub fn obs_dim(&self) -> usize {
        self.predicted_mean.len()
    }

    /// `Γ Gᵀ`.
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn innovation_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.innovation
    }

    pub fn downdate(&self) -> &Arc<LowRankDowndate> {
        &self.downdate
    }

    /// `(G Γ Gᵀ + Γ_obs)⁻¹ (y − G μ)`.
    pub fn innovation_weights(&self, y: &DVector<f64>, trace: &mut OpTrace) -> Result<DVector<f64>> {
        if y.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                context: "data vector",
                expected: self.obs_dim(),
                found: y.len(),
            });
        }
        check_finite_vector(y, "data vector")?;
        let m = self.obs_dim();
        trace.record("innovation", m, 1);
        trace.record("innovation cholesky solve", m, m);
        Ok(self.innovation.solve(&(y - &self.predicted_mean)))
    }

    pub fn mean_traced(&self, y: &DVector<f64>, trace: &mut OpTrace) -> Result<DVector<f64>> {
        let w = self.innovation_weights(y, trace)?;
        trace.record("gain product", self.gain.nrows(), self.gain.ncols());
        Ok(self.prior.mean() + &self.gain * w)
    }

    pub fn mean(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.mean_traced(y, &mut OpTrace::disabled())
    }
}

/// Exact posterior of `y = G f + ε`, `f ~ prior`, `ε ~ noise`.
///
/// Returns the posterior mean and the covariance as `Γ − B Bᵀ`. Only the
/// `m × m` innovation covariance is factorized.
pub fn exact_posterior(
    prior: &Arc<GaussianBelief>,
    forward: &DMatrix<f64>,
    noise: &GaussianBelief,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, LowRankDowndate)> {
    let update = ConjugateUpdate::new(prior.clone(), forward, noise)?;
    let mean = update.mean(y)?;
    Ok((mean, (*update.downdate).clone()))
}

/// Förstner distance `sqrt(Σ ln² λᵢ)` over the generalized eigenvalues of `(a, b)`.
///
/// Directions where both quadratic forms fall below `null_tol · max(tr a, tr b)`
/// form the shared null space and are dropped. A direction that is null in only
/// one of the two matrices makes the distance infinite.
pub fn foerstner_distance(a: &DMatrix<f64>, b: &DMatrix<f64>, null_tol: f64) -> Result<f64> {
    let n = a.nrows();
    for (m, what) in [(a, "first covariance"), (b, "second covariance")] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: n,
                found: if m.nrows() != n { m.nrows() } else { m.ncols() },
            });
        }
        check_finite_matrix(m, what)?;
    }
    if !(null_tol > 0.0 && null_tol < 1.0) {
        return Err(Error::InvalidArgument(format!("null_tol must lie in (0, 1), got {null_tol}")));
    }
    let a = symmetrize(a);
    let b = symmetrize(b);
    let scale = a.trace().max(b.trace());
    if !(scale > 0.0) {
        return Ok(0.0);
    }
    let thresh = null_tol * scale;

    let avg = (&a + &b) * 0.5;
    let eig = avg.symmetric_eigen();
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > thresh).collect();
    if keep.is_empty() {
        return Ok(0.0);
    }
    let (ar, br) = if keep.len() == n {
        (a, b)
    } else {
        let q = eig.eigenvectors.select_columns(&keep);
        (symmetrize(&(q.transpose() * &a * &q)), symmetrize(&(q.transpose() * &b * &q)))
    };

    let Some(chol) = br.cholesky() else {
        return Ok(f64::INFINITY);
    };
    let l = chol.l_dirty();
    let Some(x) = l.solve_lower_triangular(&ar) else {
        return Ok(f64::INFINITY);
    };
    let Some(whitened) = l.solve_lower_triangular(&x.transpose()) else {
        return Ok(f64::INFINITY);
    };
    let lambdas = symmetrize(&whitened).symmetric_eigenvalues();
    let mut acc = 0.0;
    for &lam in lambdas.iter() {
        if !(lam > null_tol) || lam >= 1.0 / null_tol {
            return Ok(f64::INFINITY);
        }
        acc += lam.ln().powi(2);
    }
    Ok(acc.sqrt())
}

/// Förstner distance between two downdated covariances restricted to `rows`.
pub fn foerstner_between(
    a: &LowRankDowndate,
    b: &LowRankDowndate,
    rows: Option<&[usize]>,
    null_tol: f64,
) -> Result<f64> {
    match rows {
        Some(rows) => foerstner_distance(&a.covariance_submatrix(rows), &b.covariance_submatrix(rows), null_tol),
        None => foerstner_distance(&a.covariance(), &b.covariance(), null_tol),
    }
}
