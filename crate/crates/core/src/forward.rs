//! Static linear systems `K u = f`, point observations of the state and the
//! composed forward map `G = C K⁻¹`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::linalg::{check_finite_vector, BandCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DofKind {
    Translation,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DofLabel {
    pub kind: DofKind,
    /// Coordinate along the structure axis.
    pub z: f64,
}

/// Stiffness matrix with per-dof labels. The Cholesky factor is computed on
/// first use and cached.
#[derive(Debug, Clone)]
pub struct StaticLinearSystem {
    stiffness: DMatrix<f64>,
    labels: Vec<DofLabel>,
    factor: OnceLock<BandCholesky>,
}

impl StaticLinearSystem {
    pub fn new(stiffness: DMatrix<f64>, labels: Vec<DofLabel>) -> Result<Self> {
        let d = stiffness.nrows();
        if stiffness.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "stiffness matrix must be square",
                expected: d,
                found: stiffness.ncols(),
            });
        }
        if labels.len() != d {
            return Err(Error::DimensionMismatch {
                context: "dof labels",
                expected: d,
                found: labels.len(),
            });
        }
        let asym = (&stiffness - stiffness.transpose()).amax();
        if asym > 1e-12 * stiffness.amax() {
            return Err(Error::InvalidArgument(format!(
                "stiffness matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(StaticLinearSystem {
            stiffness,
            labels,
            factor: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn labels(&self) -> &[DofLabel] {
        &self.labels
    }

    pub fn translational_dofs(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == DofKind::Translation)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn factor(&self) -> Result<&BandCholesky> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = BandCholesky::new(&self.stiffness)?;
        let _ = self.factor.set(f);
        Ok(self.factor.get().expect("factor was just set"))
    }

    /// `u = K⁻¹ f`.
    pub fn solve(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "load vector",
                expected: self.dim(),
                found: f.len(),
            });
        }
        check_finite_vector(f, "load vector")?;
        Ok(self.factor()?.solve(f))
    }

    pub fn solve_matrix(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if f.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "load matrix rows",
                expected: self.dim(),
                found: f.nrows(),
            });
        }
        Ok(self.factor()?.solve_matrix(f))
    }
}

/// Selection of `m` distinct state entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationOperator {
    indices: Vec<usize>,
}

impl ObservationOperator {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        let mut seen = vec![false; state_dim];
        for &i in &indices {
            if i >= state_dim {
                return Err(Error::InvalidArgument(format!(
                    "observation index {i} outside state dimension {state_dim}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("observation index {i} repeated")));
            }
        }
        Ok(ObservationOperator { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| u[i]))
    }

    /// `C V` for a column basis `V`.
    pub fn apply_columns(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        v.select_rows(&self.indices)
    }

    pub fn matrix(&self, state_dim: usize) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.indices.len(), state_dim);
        for (row, &i) in self.indices.iter().enumerate() {
            c[(row, i)] = 1.0;
        }
        c
    }
}

/// Draws `m` distinct translational dofs uniformly without replacement.
/// The result is sorted by dof index.
pub fn draw_observation_indices<R: Rng + ?Sized>(
    system: &StaticLinearSystem,
    m: usize,
    rng: &mut R,
) -> Result<ObservationOperator> {
    let candidates = system.translational_dofs();
    if m > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {m} observations from {} translational dofs",
            candidates.len()
        )));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), m)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    ObservationOperator::new(picked, system.dim())
}

#[derive(Debug, Clone)]
pub struct LinearForwardProblem {
    system: StaticLinearSystem,
    obs: ObservationOperator,
    prior: Arc<GaussianBelief>,
    noise: GaussianBelief,
    dense_forward: OnceLock<DMatrix<f64>>,
}

impl LinearForwardProblem {
    pub fn new(
        system: StaticLinearSystem,
        obs: ObservationOperator,
        prior: Arc<GaussianBelief>,
        noise: GaussianBelief,
    ) -> Result<Self> {
        if prior.dim() != system.dim() {
            return Err(Error::DimensionMismatch {
                context: "prior dimension vs state dimension",
                expected: system.dim(),
                found: prior.dim(),
            });
        }
        if noise.dim() != obs.len() {
            return Err(Error::DimensionMismatch {
                context: "noise dimension vs observation count",
                expected: obs.len(),
                found: noise.dim(),
            });
        }
        if let Some(&i) = obs.indices().iter().find(|&&i| i >= system.dim()) {
            return Err(Error::InvalidArgument(format!("observation index {i} out of range")));
        }
        Ok(LinearForwardProblem {
            system,
            obs,
            prior,
            noise,
            dense_forward: OnceLock::new(),
        })
    }

    pub fn system(&self) -> &StaticLinearSystem {
        &self.system
    }

    pub fn observations(&self) -> &ObservationOperator {
        &self.obs
    }

    pub fn prior(&self) -> &Arc<GaussianBelief> {
        &self.prior
    }

    pub fn noise(&self) -> &GaussianBelief {
        &self.noise
    }

    pub fn state_dim(&self) -> usize {
        self.system.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.len()
    }

    /// `C K⁻¹ f` through the cached factorization.
    pub fn apply_forward(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.system.solve(f)?;
        Ok(self.obs.apply(&u))
    }

    /// Dense `G = C K⁻¹`, assembled row by row from `m` adjoint solves and cached.
    pub fn forward_matrix(&self) -> Result<&DMatrix<f64>> {
        if let Some(g) = self.dense_forward.get() {
            return Ok(g);
        }
        let d = self.state_dim();
        let rhs = self.obs.matrix(d).transpose();
        // K symmetric: rows of C K⁻¹ are K⁻¹ Cᵀ eᵢ
        let g = self.system.solve_matrix(&rhs)?.transpose();
        let _ = self.dense_forward.set(g);
        Ok(self.dense_forward.get().expect("forward matrix was just set"))
    }

    /// Samples `f ~ prior` and returns `(f, C K⁻¹ f + ε)`.
    pub fn generate_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(DVector<f64>, DVector<f64>)> {
        let f = self.prior.sample(rng);
        let eps = self.noise.sample(rng);
        let y = self.apply_forward(&f)? + eps;
        Ok((f, y))
    }

    /// Per-observation `var(Cu) / var(Cu + ε)`, averaged over observations.
    ///
    /// Reporting convention only; nothing downstream consumes it.
    pub fn signal_to_noise(&self) -> Result<f64> {
        let g = self.forward_matrix()?;
        let gs = g * self.prior.sqrt_factor();
        let noise = self.noise.covariance();
        let m = self.obs_dim();
        if m == 0 {
            return Ok(0.0);
        }
        let total: f64 = (0..m)
            .map(|i| {
                let signal = gs.row(i).norm_squared();
                signal / (signal + noise[(i, i)])
            })
            .sum();
        Ok(total / m as f64)
    }
}
