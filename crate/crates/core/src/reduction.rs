//! Likelihood-informed and POD bases, Petrov–Galerkin reduced inverse
//! problems, and the three posterior approximations built on them.
//!
//! All three approximations replace `G` by a rank-`r` operator of the form
//! `Ĝ Tᵀ` with `Ĝ ∈ ℝ^{m×r}` and a test matrix `T ∈ ℝ^{d×r}`:
//!
//! | method  | `T`            | `Ĝ`                      |
//! |---------|----------------|--------------------------|
//! | LIS-MR  | `W`            | `C V (Wᵀ K V)⁻¹`         |
//! | POD     | `Φ_r`          | `C Φ_r (Φ_rᵀ K Φ_r)⁻¹`   |
//! | OLR     | `W Z`          | `U Σ`, from `G V = U Σ Zᵀ` |
//!
//! The posterior of `y = Ĝ Tᵀ f + ε` under the full prior is assembled by
//! [`ProjectedUpdate`]; only `m × m`, `m × r`, `r × r` and `d × r` operands
//! appear online.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::LinearForwardProblem;
use crate::gaussian::{GaussianBelief, LowRankDowndate};
use crate::linalg::{check_finite_matrix, cholesky_strict, check_finite_vector, psd_sqrt, symmetrize, ThinSvd};
use crate::trace::OpTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Lis,
    Pod,
    /// Caller-supplied pair, accepted by every pipeline.
    Custom,
}

/// How the reduced posterior mean is mapped back to the full space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanLifting {
    /// `μ + Γ T Ĝᵀ (Ĝ Γ̂ Ĝᵀ + Γ_obs)⁻¹ (y − Ĝ Tᵀ μ)`: the mean that belongs to the
    /// lifted covariance, keeping the prior mean outside the subspace.
    #[default]
    Affine,
    /// `V μ̂_pos`: the reduced mean expressed in the trial basis only.
    Subspace,
}

/// Trial basis `V`, test basis `W` and the associated singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionBasis {
    kind: BasisKind,
    trial: DMatrix<f64>,
    test: DMatrix<f64>,
    values: DVector<f64>,
}

impl ReductionBasis {
    pub fn new(kind: BasisKind, trial: DMatrix<f64>, test: DMatrix<f64>, values: DVector<f64>) -> Result<Self> {
        if trial.shape() != test.shape() {
            return Err(Error::DimensionMismatch {
                context: "test basis columns",
                expected: trial.ncols(),
                found: test.ncols(),
            });
        }
        if values.len() != trial.ncols() {
            return Err(Error::DimensionMismatch {
                context: "basis singular values",
                expected: trial.ncols(),
                found: values.len(),
            });
        }
        check_finite_matrix(&trial, "trial basis")?;
        check_finite_matrix(&test, "test basis")?;
        Ok(ReductionBasis {
            kind,
            trial,
            test,
            values,
        })
    }

    /// `V = W = I_d`.
    pub fn identity(d: usize) -> Self {
        ReductionBasis {
            kind: BasisKind::Custom,
            trial: DMatrix::identity(d, d),
            test: DMatrix::identity(d, d),
            values: DVector::from_element(d, 1.0),
        }
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn trial(&self) -> &DMatrix<f64> {
        &self.trial
    }

    pub fn test(&self) -> &DMatrix<f64> {
        &self.test
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn rank(&self) -> usize {
        self.trial.ncols()
    }

    pub fn dim(&self) -> usize {
        self.trial.nrows()
    }

    /// Leading `r` columns of both bases.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        if r > self.rank() {
            return Err(Error::RankTooLarge {
                requested: r,
                achievable: self.rank(),
            });
        }
        Ok(ReductionBasis {
            kind: self.kind,
            trial: self.trial.columns(0, r).into_owned(),
            test: self.test.columns(0, r).into_owned(),
            values: self.values.rows(0, r).into_owned(),
        })
    }

    /// `V (Wᵀ f)`.
    pub fn projector_apply(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "projector argument",
                expected: self.dim(),
                found: f.len(),
            });
        }
        Ok(&self.trial * (self.test.transpose() * f))
    }

    /// Dense `V Wᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.trial * self.test.transpose()
    }

    /// `max |Wᵀ V − I|`.
    pub fn biorthogonality_defect(&self) -> f64 {
        let r = self.rank();
        (self.test.transpose() * &self.trial - DMatrix::identity(r, r)).amax()
    }
}

fn noise_cholesky(noise_sqrt: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if noise_sqrt.nrows() != noise_sqrt.ncols() {
        return Err(Error::DimensionMismatch {
            context: "noise square-root factor columns",
            expected: noise_sqrt.nrows(),
            found: noise_sqrt.ncols(),
        });
    }
    check_finite_matrix(noise_sqrt, "noise square-root factor")?;
    cholesky_strict(&(noise_sqrt * noise_sqrt.transpose()), "noise covariance")
}

/// Likelihood-informed basis by square-root balancing.
///
/// Takes the SVD `L_obs⁻¹ G S = Ω Δ Nᵀ` with `L_obs` the Cholesky factor of
/// `S_obs S_obsᵀ`, and returns `vᵢ = S νᵢ`, `wᵢ = Gᵀ L_obs⁻ᵀ ωᵢ / δᵢ`. Only
/// square-root factors are used, so `S` may have fewer columns than rows.
pub fn lis_basis(g: &DMatrix<f64>, prior_sqrt: &DMatrix<f64>, noise_sqrt: &DMatrix<f64>, r: usize) -> Result<ReductionBasis> {
    if g.ncols() != prior_sqrt.nrows() {
        return Err(Error::DimensionMismatch {
            context: "forward operator columns vs prior factor rows",
            expected: prior_sqrt.nrows(),
            found: g.ncols(),
        });
    }
    if g.nrows() != noise_sqrt.nrows() {
        return Err(Error::DimensionMismatch {
            context: "forward operator rows vs noise factor rows",
            expected: noise_sqrt.nrows(),
            found: g.nrows(),
        });
    }
    check_finite_matrix(g, "forward operator")?;
    check_finite_matrix(prior_sqrt, "prior square-root factor")?;
    if r == 0 {
        return Err(Error::InvalidArgument("basis rank must be positive".into()));
    }
    let chol = noise_cholesky(noise_sqrt)?;
    let l = chol.l_dirty();
    let whitened = l
        .solve_lower_triangular(&(g * prior_sqrt))
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
    let mut svd = ThinSvd::new(&whitened)?;
    svd.align_by_right();
    let achievable = svd.numerical_rank();
    if r > achievable {
        return Err(Error::RankTooLarge { requested: r, achievable });
    }
    let delta = svd.singular_values.rows(0, r).into_owned();
    let trial = prior_sqrt * svd.v.columns(0, r);
    let omega = l
        .tr_solve_lower_triangular(&svd.u.columns(0, r).into_owned())
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
    let mut test = g.transpose() * omega;
    for (j, mut col) in test.column_iter_mut().enumerate() {
        col /= delta[j];
    }
    ReductionBasis::new(BasisKind::Lis, trial, test, delta)
}

/// Largest rank [`lis_basis`] accepts for these operators.
pub fn lis_achievable_rank(g: &DMatrix<f64>, prior_sqrt: &DMatrix<f64>, noise_sqrt: &DMatrix<f64>) -> Result<usize> {
    let chol = noise_cholesky(noise_sqrt)?;
    let whitened = chol
        .l_dirty()
        .solve_lower_triangular(&(g * prior_sqrt))
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
    Ok(ThinSvd::new(&whitened)?.numerical_rank())
}

/// Leading `r` left singular vectors of the snapshot matrix (`V = W = Φ_r`).
/// Snapshots are not centered.
pub fn pod_basis(snapshots: &DMatrix<f64>, r: usize) -> Result<ReductionBasis> {
    if r == 0 {
        return Err(Error::InvalidArgument("basis rank must be positive".into()));
    }
    let mut svd = ThinSvd::new(snapshots)?;
    svd.align_by_left();
    let achievable = svd.numerical_rank();
    if r > achievable {
        return Err(Error::RankTooLarge { requested: r, achievable });
    }
    let phi = svd.u.columns(0, r).into_owned();
    ReductionBasis::new(
        BasisKind::Pod,
        phi.clone(),
        phi,
        svd.singular_values.rows(0, r).into_owned(),
    )
}

/// `N` state snapshots `K⁻¹ f⁽ʲ⁾` with `f⁽ʲ⁾` drawn from the prior, in draw order.
pub fn collect_snapshots<R: Rng + ?Sized>(prob: &LinearForwardProblem, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = prob.state_dim();
    if n == 0 {
        return Ok(DMatrix::zeros(d, 0));
    }
    let mut loads = DMatrix::zeros(d, n);
    for j in 0..n {
        loads.set_column(j, &prob.prior().sample(rng));
    }
    prob.system().solve_matrix(&loads)
}

/// Conjugate update for `y = Ĝ Tᵀ f + ε` under the full prior.
///
/// Everything except the innovation weights is precomputed: the lift
/// `Γ T`, the reduced prior `Tᵀ Γ T`, the factor of `Ĝ Γ̂ Ĝᵀ + Γ_obs` and the
/// covariance downdate `Γ T Ĝᵀ (…)⁻¹ Ĝ Tᵀ Γ` compressed to `min(m, r)` columns.
#[derive(Debug, Clone)]
pub struct ProjectedUpdate {
    prior: Arc<GaussianBelief>,
    trial: DMatrix<f64>,
    g_hat: DMatrix<f64>,
    reduced_prior: GaussianBelief,
    reduced_cov: DMatrix<f64>,
    predicted: DVector<f64>,
    innovation: Cholesky<f64, Dyn>,
    lift: DMatrix<f64>,
    downdate: Arc<LowRankDowndate>,
}

impl ProjectedUpdate {
    /// `trial` is only used by [`MeanLifting::Subspace`].
    pub fn new(
        prior: Arc<GaussianBelief>,
        noise: &GaussianBelief,
        test: &DMatrix<f64>,
        trial: &DMatrix<f64>,
        g_hat: DMatrix<f64>,
    ) -> Result<Self> {
        let d = prior.dim();
        let r = test.ncols();
        if test.nrows() != d || trial.shape() != test.shape() {
            return Err(Error::DimensionMismatch {
                context: "basis rows vs prior dimension",
                expected: d,
                found: test.nrows(),
            });
        }
        if g_hat.ncols() != r {
            return Err(Error::DimensionMismatch {
                context: "reduced forward operator columns",
                expected: r,
                found: g_hat.ncols(),
            });
        }
        if g_hat.nrows() != noise.dim() {
            return Err(Error::DimensionMismatch {
                context: "reduced forward operator rows vs noise dimension",
                expected: noise.dim(),
                found: g_hat.nrows(),
            });
        }
        check_finite_matrix(&g_hat, "reduced forward operator")?;

        let s = prior.sqrt_factor();
        let st_t = s.transpose() * test;
        let lift = s * &st_t;
        let reduced_cov = symmetrize(&(st_t.transpose() * &st_t));
        let reduced_mean = test.transpose() * prior.mean();
        let reduced_prior = GaussianBelief::new(reduced_mean.clone(), psd_sqrt(&reduced_cov)?)?;

        let h = symmetrize(&(&g_hat * &reduced_cov * g_hat.transpose() + noise.covariance()));
        let innovation = cholesky_strict(&h, "reduced innovation covariance")?;
        let x = innovation
            .l_dirty()
            .solve_lower_triangular(&g_hat)
            .ok_or(Error::NotPositiveDefinite("reduced innovation covariance"))?;
        // XᵀX = Ĝᵀ H⁻¹ Ĝ = Rᵀ R
        let r_factor = x.qr().r();
        let downdate = Arc::new(LowRankDowndate::new(prior.clone(), &lift * r_factor.transpose())?);
        let predicted = &g_hat * &reduced_mean + noise.mean();
        Ok(ProjectedUpdate {
            prior,
            trial: trial.clone(),
            g_hat,
            reduced_prior,
            reduced_cov,
            predicted,
            innovation,
            lift,
            downdate,
        })
    }

    pub fn prior(&self) -> &Arc<GaussianBelief> {
        &self.prior
    }

    pub fn g_hat(&self) -> &DMatrix<f64> {
        &self.g_hat
    }

    /// `N(Tᵀ μ, Tᵀ Γ T)` with an `r × r` square-root factor.
    pub fn reduced_prior(&self) -> &GaussianBelief {
        &self.reduced_prior
    }

    /// `Γ T`.
    pub fn lift(&self) -> &DMatrix<f64> {
        &self.lift
    }

    pub fn downdate(&self) -> &Arc<LowRankDowndate> {
        &self.downdate
    }

    pub fn posterior(&self, y: &DVector<f64>, lifting: MeanLifting) -> Result<PosteriorApproximation> {
        self.posterior_traced(y, lifting, &mut OpTrace::disabled())
    }

    pub fn posterior_traced(
        &self,
        y: &DVector<f64>,
        lifting: MeanLifting,
        trace: &mut OpTrace,
    ) -> Result<PosteriorApproximation> {
        let m = self.predicted.len();
        if y.len() != m {
            return Err(Error::DimensionMismatch {
                context: "data vector",
                expected: m,
                found: y.len(),
            });
        }
        check_finite_vector(y, "data vector")?;
        let r = self.g_hat.ncols();
        trace.record("innovation", m, 1);
        let weights = self.innovation.solve(&(y - &self.predicted));
        trace.record("innovation cholesky solve", m, m);
        let coeff = self.g_hat.tr_mul(&weights);
        trace.record("reduced forward transpose", m, r);
        let reduced_mean = self.reduced_prior.mean() + &self.reduced_cov * &coeff;
        trace.record("reduced prior covariance", r, r);
        let mean = match lifting {
            MeanLifting::Affine => {
                trace.record("lift", self.lift.nrows(), r);
                self.prior.mean() + &self.lift * &coeff
            }
            MeanLifting::Subspace => {
                trace.record("trial basis", self.trial.nrows(), r);
                &self.trial * &reduced_mean
            }
        };
        Ok(PosteriorApproximation {
            mean,
            reduced_mean: Some(reduced_mean),
            covariance: self.downdate.clone(),
        })
    }
}

/// Full-space posterior estimate with covariance `Γ − B Bᵀ`.
#[derive(Debug, Clone)]
pub struct PosteriorApproximation {
    pub mean: DVector<f64>,
    /// Posterior mean in reduced coordinates, when the method has them.
    pub reduced_mean: Option<DVector<f64>>,
    pub covariance: Arc<LowRankDowndate>,
}

/// Reduced operators `K̂ = Wᵀ K V`, `Ĉ = C V`, `Ĝ = Ĉ K̂⁻¹` and reduced prior.
#[derive(Debug, Clone)]
pub struct ReducedInverseProblem {
    basis: ReductionBasis,
    k_hat: DMatrix<f64>,
    c_hat: DMatrix<f64>,
    update: ProjectedUpdate,
}

/// Petrov–Galerkin reduction of `K u = f`, `y = C u + ε` onto `(V, W)`.
/// `K̂` is factorized by LU with partial pivoting.
pub fn reduce_petrov_galerkin(prob: &LinearForwardProblem, basis: &ReductionBasis) -> Result<ReducedInverseProblem> {
    if basis.dim() != prob.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "basis rows vs state dimension",
            expected: prob.state_dim(),
            found: basis.dim(),
        });
    }
    let k_hat = basis.test().transpose() * (prob.system().stiffness() * basis.trial());
    let c_hat = prob.observations().apply_columns(basis.trial());
    ReducedInverseProblem::from_parts(basis.clone(), k_hat, c_hat, prob.prior().clone(), prob.noise())
}

/// `Ĉ K̂⁻¹` through an LU factorization of `K̂ᵀ`.
fn reduced_forward(k_hat: &DMatrix<f64>, c_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = k_hat.nrows();
    let lu = k_hat.transpose().lu();
    let u = lu.u();
    let scale = u.amax();
    let min_pivot = (0..r).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if r > 0 && !(min_pivot > f64::EPSILON * scale) {
        return Err(Error::Singular {
            context: "reduced stiffness matrix",
            rank: r,
        });
    }
    let x = lu.solve(&c_hat.transpose()).ok_or(Error::Singular {
        context: "reduced stiffness matrix",
        rank: r,
    })?;
    Ok(x.transpose())
}

impl ReducedInverseProblem {
    /// Rebuilds the online update from stored reduced operators; `K` and `C`
    /// are not needed.
    pub fn from_parts(
        basis: ReductionBasis,
        k_hat: DMatrix<f64>,
        c_hat: DMatrix<f64>,
        prior: Arc<GaussianBelief>,
        noise: &GaussianBelief,
    ) -> Result<Self> {
        let r = basis.rank();
        if k_hat.shape() != (r, r) {
            return Err(Error::DimensionMismatch {
                context: "reduced stiffness size",
                expected: r,
                found: k_hat.nrows(),
            });
        }
        if c_hat.ncols() != r {
            return Err(Error::DimensionMismatch {
                context: "reduced observation operator columns",
                expected: r,
                found: c_hat.ncols(),
            });
        }
        let g_hat = reduced_forward(&k_hat, &c_hat)?;
        let update = ProjectedUpdate::new(prior, noise, basis.test(), basis.trial(), g_hat)?;
        Ok(ReducedInverseProblem {
            basis,
            k_hat,
            c_hat,
            update,
        })
    }

    pub fn basis(&self) -> &ReductionBasis {
        &self.basis
    }

    pub fn k_hat(&self) -> &DMatrix<f64> {
        &self.k_hat
    }

    pub fn c_hat(&self) -> &DMatrix<f64> {
        &self.c_hat
    }

    pub fn g_hat(&self) -> &DMatrix<f64> {
        self.update.g_hat()
    }

    pub fn prior_hat(&self) -> &GaussianBelief {
        self.update.reduced_prior()
    }

    pub fn update(&self) -> &ProjectedUpdate {
        &self.update
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }

    /// `Ĝ Wᵀ f`.
    pub fn apply_reduced_forward(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        if f.len() != self.basis.dim() {
            return Err(Error::DimensionMismatch {
                context: "reduced forward argument",
                expected: self.basis.dim(),
                found: f.len(),
            });
        }
        Ok(self.g_hat() * (self.basis.test().transpose() * f))
    }

    /// `‖Ĝ Wᵀ − G V Wᵀ‖_F / ‖G V Wᵀ‖_F`, the gap between the reduced model and
    /// the projected full model.
    pub fn operator_discrepancy(&self, g: &DMatrix<f64>) -> Result<f64> {
        if g.ncols() != self.basis.dim() || g.nrows() != self.g_hat().nrows() {
            return Err(Error::DimensionMismatch {
                context: "forward operator vs reduced problem",
                expected: self.basis.dim(),
                found: g.ncols(),
            });
        }
        let gv = g * self.basis.trial();
        let wt = self.basis.test().transpose();
        let reference = &gv * &wt;
        let diff = (self.g_hat() - gv) * wt;
        let norm = reference.norm();
        Ok(if norm > 0.0 { diff.norm() / norm } else { diff.norm() })
    }

    pub fn posterior(&self, y: &DVector<f64>, lifting: MeanLifting) -> Result<PosteriorApproximation> {
        self.update.posterior(y, lifting)
    }

    pub fn posterior_traced(
        &self,
        y: &DVector<f64>,
        lifting: MeanLifting,
        trace: &mut OpTrace,
    ) -> Result<PosteriorApproximation> {
        self.update.posterior_traced(y, lifting, trace)
    }
}

fn require_kind(basis: &ReductionBasis, wanted: BasisKind, method: &str) -> Result<()> {
    if basis.kind() == wanted || basis.kind() == BasisKind::Custom {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{method} needs a {wanted:?} basis, got {:?}",
            basis.kind()
        )))
    }
}

/// LIS model-reduction posterior with the default affine lift.
pub fn lis_mr_posterior(red: &ReducedInverseProblem, y: &DVector<f64>) -> Result<PosteriorApproximation> {
    require_kind(red.basis(), BasisKind::Lis, "LIS-MR")?;
    red.posterior(y, MeanLifting::Affine)
}

/// POD Galerkin posterior with the default affine lift.
pub fn pod_posterior(red: &ReducedInverseProblem, y: &DVector<f64>) -> Result<PosteriorApproximation> {
    require_kind(red.basis(), BasisKind::Pod, "POD")?;
    red.posterior(y, MeanLifting::Affine)
}

/// Optimal low-rank approximation with `G P = (U Σ)(W Z)ᵀ` from the SVD of `G V`.
#[derive(Debug, Clone)]
pub struct OlrApproximation {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    singular_values: DVector<f64>,
    update: ProjectedUpdate,
}

impl OlrApproximation {
    pub fn new(prob: &LinearForwardProblem, basis: &ReductionBasis) -> Result<Self> {
        require_kind(basis, BasisKind::Lis, "OLR")?;
        if basis.dim() != prob.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "basis rows vs state dimension",
                expected: prob.state_dim(),
                found: basis.dim(),
            });
        }
        let gv = prob.observations().apply_columns(&prob.system().solve_matrix(basis.trial())?);
        let svd = ThinSvd::new(&gv)?;
        let mut left = svd.u.clone();
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col *= svd.singular_values[j];
        }
        let right = basis.test() * &svd.v;
        let update = ProjectedUpdate::new(prob.prior().clone(), prob.noise(), &right, &right, left.clone())?;
        Ok(OlrApproximation {
            left,
            right,
            singular_values: svd.singular_values,
            update,
        })
    }

    /// `U Σ` (`m × r`).
    pub fn left_factor(&self) -> &DMatrix<f64> {
        &self.left
    }

    /// `W Z` (`d × r`).
    pub fn right_factor(&self) -> &DMatrix<f64> {
        &self.right
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// `G P f` at `O(r (m + d))` cost.
    pub fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.left * self.right.tr_mul(f)
    }

    pub fn posterior(&self, y: &DVector<f64>) -> Result<PosteriorApproximation> {
        let mut post = self.update.posterior(y, MeanLifting::Affine)?;
        post.reduced_mean = None;
        Ok(post)
    }

    pub fn update(&self) -> &ProjectedUpdate {
        &self.update
    }
}

pub fn olr_posterior(prob: &LinearForwardProblem, basis: &ReductionBasis, y: &DVector<f64>) -> Result<PosteriorApproximation> {
    OlrApproximation::new(prob, basis)?.posterior(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_bar;
    use crate::forward::{draw_observation_indices, DofKind, DofLabel, ObservationOperator, StaticLinearSystem};
    use crate::gaussian::{exact_posterior, foerstner_between, DEFAULT_NULL_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    /// Random SPD-stiffness problem; `obs` indices must be below `d`.
    fn toy_problem(d: usize, obs: Vec<usize>, prior_width: usize, noise_var: f64, seed: u64) -> LinearForwardProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(d, d, &mut rng);
        let k = &a * a.transpose() + DMatrix::identity(d, d) * d as f64;
        let labels = (0..d)
            .map(|i| DofLabel {
                kind: DofKind::Translation,
                z: i as f64,
            })
            .collect();
        let system = StaticLinearSystem::new(symmetrize(&k), labels).unwrap();
        let mean = randn(d, 1, &mut rng).column(0).into_owned();
        let prior = Arc::new(GaussianBelief::new(mean, randn(d, prior_width, &mut rng)).unwrap());
        let m = obs.len();
        let op = ObservationOperator::new(obs, d).unwrap();
        LinearForwardProblem::new(system, op, prior, GaussianBelief::isotropic(m, noise_var).unwrap()).unwrap()
    }

    fn lis_for(prob: &LinearForwardProblem, r: usize) -> ReductionBasis {
        lis_basis(
            prob.forward_matrix().unwrap(),
            prob.prior().sqrt_factor(),
            prob.noise().sqrt_factor(),
            r,
        )
        .unwrap()
    }

    #[test]
    fn identity_problem_basis() {
        let i2 = DMatrix::identity(2, 2);
        let b = lis_basis(&i2, &i2, &i2, 2).unwrap();
        assert!((b.values() - DVector::from_element(2, 1.0)).amax() < 1e-14);
        assert!((b.trial() * b.trial().transpose() - &i2).amax() < 1e-14);
        assert!(b.biorthogonality_defect() < 1e-14);
    }

    #[test]
    fn lis_matches_generalized_eigenproblem() {
        let prob = toy_problem(3, vec![0, 2], 3, 0.3, 21);
        let g = prob.forward_matrix().unwrap().clone();
        let gamma = prob.prior().covariance();
        let gamma_obs = prob.noise().covariance();
        let basis = lis_for(&prob, 2);

        // oracle: Lᵀ Gᵀ Γ_obs⁻¹ G L x = δ² x with Γ = L Lᵀ, v = L x
        let l = gamma.clone().cholesky().unwrap().unpack();
        let fisher = g.transpose() * gamma_obs.clone().try_inverse().unwrap() * &g;
        let eig = symmetrize(&(l.transpose() * &fisher * &l)).symmetric_eigen();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let gamma_inv = gamma.clone().try_inverse().unwrap();
        for j in 0..2 {
            let lam = eig.eigenvalues[order[j]];
            assert!((basis.values()[j].powi(2) - lam).abs() <= 1e-8 * lam);
            let mut v = &l * eig.eigenvectors.column(order[j]);
            if v.dot(&basis.trial().column(j)) < 0.0 {
                v.neg_mut();
            }
            assert!((&v - basis.trial().column(j)).norm() <= 1e-8 * v.norm());
            let w = &gamma_inv * basis.trial().column(j);
            assert!((&w - basis.test().column(j)).norm() <= 1e-8 * w.norm());
        }
    }

    #[test]
    fn rayleigh_quotient_is_maximal_at_leading_vector() {
        let prob = toy_problem(6, vec![1, 3, 4], 6, 0.05, 5);
        let g = prob.forward_matrix().unwrap();
        let gamma_inv = prob.prior().covariance().try_inverse().unwrap();
        let obs_inv = prob.noise().covariance().try_inverse().unwrap();
        let quotient = |v: &DVector<f64>| {
            let num = (v.transpose() * g.transpose() * &obs_inv * g * v)[(0, 0)];
            let den = (v.transpose() * &gamma_inv * v)[(0, 0)];
            num / den
        };
        let basis = lis_for(&prob, 3);
        let v1 = basis.trial().column(0).into_owned();
        let d1 = basis.values()[0].powi(2);
        assert!((quotient(&v1) - d1).abs() <= 1e-8 * d1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let v = randn(6, 1, &mut rng).column(0).normalize();
            assert!(quotient(&v) <= d1 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rank_beyond_data_is_rejected() {
        let prob = toy_problem(5, vec![0, 4], 5, 0.1, 3);
        let err = lis_basis(
            prob.forward_matrix().unwrap(),
            prob.prior().sqrt_factor(),
            prob.noise().sqrt_factor(),
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::RankTooLarge { requested: 3, achievable: 2 }));
    }

    #[test]
    fn singular_prior_basis_is_biorthogonal() {
        let prob = toy_problem(8, vec![0, 3, 6], 2, 0.1, 8);
        let basis = lis_for(&prob, 2);
        assert!(basis.biorthogonality_defect() < 1e-10);
        // Γ W = V even though Γ is singular
        let gw = prob.prior().covariance() * basis.test();
        assert!(rel_mat(&gw, basis.trial()) < 1e-10);
    }

    #[test]
    fn projector_properties() {
        let prob = toy_problem(5, vec![0, 2, 4], 5, 0.2, 13);
        let basis = lis_for(&prob, 2);
        let p = basis.projector();
        assert!((&p * &p - &p).amax() < 1e-10 * p.amax());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = randn(5, 1, &mut rng).column(0).into_owned();
        let pf = basis.projector_apply(&f).unwrap();
        assert!(rel(&pf, &(&p * &f)) < 1e-14);
        let ppf = basis.projector_apply(&pf).unwrap();
        assert!(rel(&ppf, &pf) < 1e-10);
        let in_span = basis.trial() * DVector::from_vec(vec![0.7, -1.3]);
        assert!(rel(&basis.projector_apply(&in_span).unwrap(), &in_span) < 1e-10);
    }

    #[test]
    fn pod_rank_one_data() {
        let u = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        let snaps = DMatrix::from_columns(&[u.clone(), u.clone(), u.clone()]);
        let b = pod_basis(&snaps, 1).unwrap();
        let phi = b.trial().column(0);
        let target = &u / u.norm();
        assert!((phi - &target).norm().min((phi + &target).norm()) < 1e-12);
        assert!(matches!(pod_basis(&snaps, 2), Err(Error::RankTooLarge { achievable: 1, .. })));
    }

    #[test]
    fn pod_is_optimal_among_random_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let snaps = randn(8, 5, &mut rng);
        for r in 1..=4 {
            let b = pod_basis(&snaps, r).unwrap();
            let phi = b.trial();
            assert!((phi.transpose() * phi - DMatrix::identity(r, r)).amax() < 1e-12);
            let err = (&snaps - phi * (phi.transpose() * &snaps)).norm();
            for _ in 0..100 {
                let q = randn(8, r, &mut rng).qr().q();
                let other = (&snaps - &q * (q.transpose() * &snaps)).norm();
                assert!(err <= other + 1e-12);
            }
        }
    }

    #[test]
    fn snapshots_are_solutions_and_replayable() {
        let prob = toy_problem(6, vec![1], 6, 0.1, 2);
        let empty = collect_snapshots(&prob, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(empty.shape(), (6, 0));
        let a = collect_snapshots(&prob, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = collect_snapshots(&prob, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for j in 0..4 {
            let f = prob.prior().sample(&mut rng);
            let res = prob.system().stiffness() * a.column(j) - &f;
            assert!(res.norm() <= 1e-10 * f.norm());
        }
    }

    #[test]
    fn full_identity_basis_reproduces_full_problem() {
        let prob = toy_problem(4, vec![0, 3], 4, 0.1, 31);
        let red = reduce_petrov_galerkin(&prob, &ReductionBasis::identity(4)).unwrap();
        assert!(rel_mat(red.k_hat(), prob.system().stiffness()) < 1e-15);
        assert!(rel_mat(red.g_hat(), prob.forward_matrix().unwrap()) < 1e-12);
        let y = DVector::from_vec(vec![0.3, -0.1]);
        let (mean, cov) = exact_posterior(prob.prior(), prob.forward_matrix().unwrap(), prob.noise(), &y).unwrap();
        let post = pod_posterior(&red, &y).unwrap();
        assert!(rel(&post.mean, &mean) < 1e-10);
        assert!(rel_mat(&post.covariance.covariance(), &cov.covariance()) < 1e-10);
    }

    #[test]
    fn coordinate_projection_on_diagonal_system() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 5.0]));
        let labels = (0..3)
            .map(|i| DofLabel {
                kind: DofKind::Translation,
                z: i as f64,
            })
            .collect();
        let system = StaticLinearSystem::new(k, labels).unwrap();
        let prior = Arc::new(GaussianBelief::isotropic(3, 1.0).unwrap());
        let obs = ObservationOperator::new(vec![0, 1], 3).unwrap();
        let prob = LinearForwardProblem::new(system, obs, prior, GaussianBelief::isotropic(2, 1.0).unwrap()).unwrap();
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let basis = ReductionBasis::new(BasisKind::Custom, e1.clone(), e1, DVector::from_element(1, 1.0)).unwrap();
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        assert_eq!(red.k_hat()[(0, 0)], 2.0);
        assert_eq!(red.g_hat().as_slice(), &[0.5, 0.0]);
    }

    #[test]
    fn singular_reduced_stiffness_is_reported() {
        let prob = toy_problem(3, vec![0], 3, 0.1, 1);
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let w = DMatrix::zeros(3, 1);
        let basis = ReductionBasis::new(BasisKind::Custom, v, w, DVector::from_element(1, 1.0)).unwrap();
        let err = reduce_petrov_galerkin(&prob, &basis).unwrap_err();
        assert!(matches!(err, Error::Singular { rank: 1, .. }));
    }

    /// Dense transcription of the reduced update and its lifts.
    fn dense_reduced_oracle(
        prob: &LinearForwardProblem,
        v: &DMatrix<f64>,
        w: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let k = prob.system().stiffness();
        let c = prob.observations().matrix(prob.state_dim());
        let g_hat = &c * v * (w.transpose() * k * v).try_inverse().unwrap();
        let gamma = prob.prior().covariance();
        let mu = prob.prior().mean();
        let gamma_obs = prob.noise().covariance();
        let gam_hat = w.transpose() * &gamma * w;
        let mu_hat = w.transpose() * mu;
        let h_inv = (&g_hat * &gam_hat * g_hat.transpose() + &gamma_obs).try_inverse().unwrap();
        let mu_hat_pos = &mu_hat + &gam_hat * g_hat.transpose() * &h_inv * (y - &g_hat * &mu_hat);
        let subspace = v * mu_hat_pos;
        let affine = mu + &gamma * w * g_hat.transpose() * &h_inv * (y - &g_hat * &mu_hat);
        let cov = &gamma - &gamma * w * g_hat.transpose() * &h_inv * &g_hat * w.transpose() * &gamma;
        (subspace, affine, cov)
    }

    #[test]
    fn lis_rank_one_matches_dense_formulas() {
        let prob = toy_problem(3, vec![1], 3, 0.2, 41);
        let basis = lis_for(&prob, 1);
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        let y = DVector::from_element(1, 0.8);
        let (subspace, affine, cov) = dense_reduced_oracle(&prob, basis.trial(), basis.test(), &y);
        let post = lis_mr_posterior(&red, &y).unwrap();
        assert!(rel(&post.mean, &affine) < 1e-10);
        assert!(rel_mat(&post.covariance.covariance(), &cov) < 1e-10);
        let sub = red.posterior(&y, MeanLifting::Subspace).unwrap();
        assert!(rel(&sub.mean, &subspace) < 1e-10);
    }

    #[test]
    fn pod_matches_dense_formulas() {
        let prob = toy_problem(3, vec![0, 2], 3, 0.2, 43);
        let snaps = collect_snapshots(&prob, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let basis = pod_basis(&snaps, 2).unwrap();
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        let y = DVector::from_vec(vec![0.1, -0.4]);
        let (subspace, affine, cov) = dense_reduced_oracle(&prob, basis.trial(), basis.test(), &y);
        let post = pod_posterior(&red, &y).unwrap();
        assert!(rel(&post.mean, &affine) < 1e-10);
        assert!(rel_mat(&post.covariance.covariance(), &cov) < 1e-10);
        assert!(rel(&red.posterior(&y, MeanLifting::Subspace).unwrap().mean, &subspace) < 1e-10);
    }

    #[test]
    fn zero_innovation_for_lis() {
        let prob = toy_problem(5, vec![0, 2, 4], 5, 0.2, 47);
        let basis = lis_for(&prob, 2);
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        let mu = prob.prior().mean();
        let y = red.g_hat() * (basis.test().transpose() * mu);
        let affine = lis_mr_posterior(&red, &y).unwrap();
        assert!(rel(&affine.mean, mu) < 1e-12);
        let sub = red.posterior(&y, MeanLifting::Subspace).unwrap();
        assert!(rel(&sub.mean, &basis.projector_apply(mu).unwrap()) < 1e-12);
    }

    #[test]
    fn olr_zero_innovation_and_full_rank() {
        let prob = toy_problem(7, vec![1, 2, 5], 7, 0.1, 53);
        let g = prob.forward_matrix().unwrap();
        let basis = lis_for(&prob, 3);
        let olr = OlrApproximation::new(&prob, &basis).unwrap();
        let mu = prob.prior().mean();
        let post = olr.posterior(&(g * mu)).unwrap();
        assert!(rel(&post.mean, mu) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = randn(7, 1, &mut rng).column(0).into_owned();
        assert!(rel(&olr.apply(&f), &(g * basis.projector_apply(&f).unwrap())) < 1e-12);
        let y = randn(3, 1, &mut rng).column(0).into_owned();
        let (mean, cov) = exact_posterior(prob.prior(), g, prob.noise(), &y).unwrap();
        let post = olr.posterior(&y).unwrap();
        assert!(rel(&post.mean, &mean) < 1e-9);
        assert!(rel_mat(&post.covariance.covariance(), &cov.covariance()) < 1e-9);
    }

    #[test]
    fn all_pipelines_exact_at_full_dimension() {
        let d = 4;
        let prob = toy_problem(d, (0..d).collect(), d, 0.1, 59);
        let g = prob.forward_matrix().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = randn(d, 1, &mut rng).column(0).into_owned();
        let (mean, cov) = exact_posterior(prob.prior(), g, prob.noise(), &y).unwrap();
        let exact_cov = cov.covariance();

        let lis = lis_for(&prob, d);
        let lis_post = lis_mr_posterior(&reduce_petrov_galerkin(&prob, &lis).unwrap(), &y).unwrap();
        let pod = pod_basis(&collect_snapshots(&prob, 6, &mut rng).unwrap(), d).unwrap();
        let pod_post = pod_posterior(&reduce_petrov_galerkin(&prob, &pod).unwrap(), &y).unwrap();
        let olr_post = olr_posterior(&prob, &lis, &y).unwrap();
        for post in [lis_post, pod_post, olr_post] {
            assert!(rel(&post.mean, &mean) < 1e-9);
            assert!(rel_mat(&post.covariance.covariance(), &exact_cov) < 1e-9);
        }
    }

    #[test]
    fn wrong_basis_kind_is_rejected() {
        let prob = toy_problem(4, vec![0, 1], 4, 0.1, 61);
        let snaps = collect_snapshots(&prob, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let pod = pod_basis(&snaps, 2).unwrap();
        let red = reduce_petrov_galerkin(&prob, &pod).unwrap();
        assert!(lis_mr_posterior(&red, &DVector::zeros(2)).is_err());
        assert!(OlrApproximation::new(&prob, &pod).is_err());
    }

    #[test]
    fn online_solve_touches_no_state_sized_square() {
        let prob = toy_problem(30, vec![2, 11, 19, 27], 30, 0.1, 67);
        let basis = lis_for(&prob, 3);
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        let mut trace = OpTrace::recording();
        red.posterior_traced(&DVector::zeros(4), MeanLifting::Affine, &mut trace).unwrap();
        assert!(trace.count() > 0);
        assert_eq!(trace.square_ops_of_dim(30), 0);
        assert!(trace.max_operand_len() <= 30 * 3);
        assert_eq!(red.g_hat().len(), 4 * 3);
    }

    #[test]
    fn bar_lis_reduced_operator_matches_projected_full_operator() {
        let bar = build_bar(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = draw_observation_indices(&bar.system, 10, &mut rng).unwrap();
        let prob = LinearForwardProblem::new(
            bar.system.clone(),
            obs,
            Arc::new(bar.prior.clone()),
            GaussianBelief::isotropic(10, 1e-5).unwrap(),
        )
        .unwrap();
        let g = prob.forward_matrix().unwrap();
        let basis = lis_for(&prob, 10);
        let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
        for _ in 0..50 {
            let f = prob.prior().sample(&mut rng);
            let reduced = red.apply_reduced_forward(&f).unwrap();
            let projected = g * basis.projector_apply(&f).unwrap();
            assert!(rel(&reduced, &projected) < 1e-8);
        }
        assert!(red.operator_discrepancy(g).unwrap() < 1e-8);
    }

    #[test]
    fn downdates_are_psd_valid() {
        let prob = toy_problem(9, vec![0, 4, 8], 5, 0.05, 71);
        let gamma = prob.prior().covariance();
        let norm = gamma.clone().symmetric_eigenvalues().max();
        for r in 1..=3 {
            let basis = lis_for(&prob, r);
            let red = reduce_petrov_galerkin(&prob, &basis).unwrap();
            let post = lis_mr_posterior(&red, &DVector::zeros(3)).unwrap();
            let min = symmetrize(&post.covariance.covariance()).symmetric_eigenvalues().min();
            assert!(min >= -1e-8 * norm);
            let olr = olr_posterior(&prob, &basis, &DVector::zeros(3)).unwrap();
            let dist = foerstner_between(&olr.covariance, &post.covariance, None, DEFAULT_NULL_TOL).unwrap();
            assert!(dist.is_finite());
        }
    }
}
