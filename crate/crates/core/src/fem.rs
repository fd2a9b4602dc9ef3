//! The two structural testbeds: a clamped axial bar with linear elements and a
//! free-free Euler–Bernoulli beam on a Winkler foundation with cubic elements.
//!
//! In both, the load is a Gaussian random field discretized by the element
//! midpoint rule (`q ∈ ℝⁿ`) and mapped to nodal forces by `f = L q`, where `L`
//! holds the integrals of the element shape functions. The prior on `f` is
//! therefore `N(L μ_Q, L Γ_QQ Lᵀ)` with square-root factor `L chol(Γ_QQ)`.
//!
//! Physical constants are used exactly as tabulated (kN, m); no unit
//! conversion is performed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{DofKind, DofLabel, StaticLinearSystem};
use crate::gaussian::GaussianBelief;
use crate::linalg::cholesky_jittered;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomFieldSpec {
    pub mean: f64,
    pub std_dev: f64,
    pub correlation_length: f64,
}

impl RandomFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std_dev > 0.0 && self.correlation_length > 0.0 && self.mean.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "random field needs finite mean and positive std/correlation length: {self:?}"
            )));
        }
        Ok(())
    }

    /// Exponential kernel `σ² exp(−|z₁ − z₂| / θ)`.
    pub fn kernel(&self, z1: f64, z2: f64) -> f64 {
        self.std_dev.powi(2) * (-(z1 - z2).abs() / self.correlation_length).exp()
    }
}

pub fn kernel_covariance(spec: &RandomFieldSpec, midpoints: &[f64]) -> DMatrix<f64> {
    let n = midpoints.len();
    DMatrix::from_fn(n, n, |i, j| spec.kernel(midpoints[i], midpoints[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelConstants {
    Bar {
        length: f64,
        /// Axial rigidity `D` (N).
        rigidity: f64,
        elements: usize,
    },
    Tunnel {
        length: f64,
        outer_diameter: f64,
        wall_thickness: f64,
        joint_reduction: f64,
        youngs_modulus: f64,
        second_moment: f64,
        /// `ζ E I / D_outer`, the coefficient of `u''''` after normalization.
        effective_rigidity: f64,
        k_sand: f64,
        k_clay: f64,
        interface: f64,
        elements: usize,
    },
}

/// Finite element model together with the induced load prior.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub system: StaticLinearSystem,
    pub prior: GaussianBelief,
    /// `d × n` shape-function integrals.
    pub load_map: DMatrix<f64>,
    pub field: RandomFieldSpec,
    pub midpoints: Vec<f64>,
    pub constants: ModelConstants,
}

impl ModelBundle {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// Nodal forces `L q` for an element-wise load vector.
    pub fn nodal_load(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.load_map.ncols() {
            return Err(Error::DimensionMismatch {
                context: "element load vector",
                expected: self.load_map.ncols(),
                found: q.len(),
            });
        }
        Ok(&self.load_map * q)
    }

    /// Midpoint-rule discretization of a deterministic load function.
    pub fn discretize_load(&self, q: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.midpoints.len(), self.midpoints.iter().map(|&z| q(z)))
    }
}

fn field_prior(load_map: &DMatrix<f64>, field: &RandomFieldSpec, midpoints: &[f64]) -> Result<GaussianBelief> {
    field.validate()?;
    let kqq = kernel_covariance(field, midpoints);
    let chol = cholesky_jittered(&kqq)?;
    let sqrt = load_map * chol.l();
    let mean = load_map * DVector::from_element(midpoints.len(), field.mean);
    GaussianBelief::new(mean, sqrt)
}

pub const BAR_LENGTH: f64 = 2.0;
pub const BAR_RIGIDITY: f64 = 4e8;
pub const BAR_LOAD_MEAN: f64 = 4e6;

/// Clamped–free axial bar `D u'' + q = 0`, `u(0) = 0`, `u'(L) = 0`.
///
/// The clamped node is eliminated, so `d = n`.
pub fn build_bar(n: usize) -> Result<ModelBundle> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("bar needs at least 2 elements, got {n}")));
    }
    let length = BAR_LENGTH;
    let rigidity = BAR_RIGIDITY;
    let h = length / n as f64;
    let nodes = n + 1;
    let mut k_full = DMatrix::zeros(nodes, nodes);
    let mut l_full = DMatrix::zeros(nodes, n);
    let ke = rigidity / h;
    for e in 0..n {
        k_full[(e, e)] += ke;
        k_full[(e, e + 1)] -= ke;
        k_full[(e + 1, e)] -= ke;
        k_full[(e + 1, e + 1)] += ke;
        l_full[(e, e)] += h / 2.0;
        l_full[(e + 1, e)] += h / 2.0;
    }
    let stiffness = k_full.view((1, 1), (n, n)).into_owned();
    let load_map = l_full.rows(1, n).into_owned();
    let labels = (1..nodes)
        .map(|i| DofLabel {
            kind: DofKind::Translation,
            z: i as f64 * h,
        })
        .collect();
    let system = StaticLinearSystem::new(stiffness, labels)?;
    let midpoints: Vec<f64> = (0..n).map(|e| (e as f64 + 0.5) * h).collect();
    let field = RandomFieldSpec {
        mean: BAR_LOAD_MEAN,
        std_dev: 0.3 * BAR_LOAD_MEAN,
        correlation_length: length / 2.0,
    };
    let prior = field_prior(&load_map, &field, &midpoints)?;
    Ok(ModelBundle {
        system,
        prior,
        load_map,
        field,
        midpoints,
        constants: ModelConstants::Bar {
            length,
            rigidity,
            elements: n,
        },
    })
}

pub const TUNNEL_LENGTH: f64 = 200.0;
pub const TUNNEL_OUTER_DIAMETER: f64 = 6.2;
pub const TUNNEL_WALL_THICKNESS: f64 = 0.35;
pub const TUNNEL_JOINT_REDUCTION: f64 = 1.0 / 7.0;
pub const TUNNEL_YOUNGS_MODULUS: f64 = 35e6;
pub const K_SAND: f64 = 33_000.0;
pub const K_CLAY: f64 = 5_000.0;
pub const TUNNEL_LOAD_MEAN: f64 = 3.0;

/// Second moment of area of a hollow circular section.
pub fn hollow_circle_second_moment(outer: f64, thickness: f64) -> f64 {
    let inner = outer - 2.0 * thickness;
    std::f64::consts::PI / 64.0 * (outer.powi(4) - inner.powi(4))
}

/// Euler–Bernoulli bending stiffness for dofs `(w₁, θ₁, w₂, θ₂)`.
pub fn beam_bending_matrix(rigidity: f64, h: f64) -> [[f64; 4]; 4] {
    let c = rigidity / h.powi(3);
    let h2 = h * h;
    [
        [12.0 * c, 6.0 * h * c, -12.0 * c, 6.0 * h * c],
        [6.0 * h * c, 4.0 * h2 * c, -6.0 * h * c, 2.0 * h2 * c],
        [-12.0 * c, -6.0 * h * c, 12.0 * c, -6.0 * h * c],
        [6.0 * h * c, 2.0 * h2 * c, -6.0 * h * c, 4.0 * h2 * c],
    ]
}

/// Consistent Winkler foundation matrix `k ∫ Nᵢ Nⱼ`.
pub fn winkler_foundation_matrix(k: f64, h: f64) -> [[f64; 4]; 4] {
    let c = k * h / 420.0;
    let h2 = h * h;
    [
        [156.0 * c, 22.0 * h * c, 54.0 * c, -13.0 * h * c],
        [22.0 * h * c, 4.0 * h2 * c, 13.0 * h * c, -3.0 * h2 * c],
        [54.0 * c, 13.0 * h * c, 156.0 * c, -22.0 * h * c],
        [-13.0 * h * c, -3.0 * h2 * c, -22.0 * h * c, 4.0 * h2 * c],
    ]
}

/// `∫₀ʰ Nᵢ` for the four Hermite shape functions.
pub fn cubic_load_integrals(h: f64) -> [f64; 4] {
    [h / 2.0, h * h / 12.0, h / 2.0, -h * h / 12.0]
}

/// Free-free tunnel beam `EI_eff u'''' + k(z) u = q(z)` on `[0, 200]` m with
/// sand below `z = 100` m and clay above; dofs are node-major `(w, θ)`.
pub fn build_tunnel(n: usize) -> Result<ModelBundle> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "tunnel needs an even, positive element count, got {n}"
        )));
    }
    let length = TUNNEL_LENGTH;
    let second_moment = hollow_circle_second_moment(TUNNEL_OUTER_DIAMETER, TUNNEL_WALL_THICKNESS);
    let effective_rigidity = TUNNEL_JOINT_REDUCTION * TUNNEL_YOUNGS_MODULUS * second_moment / TUNNEL_OUTER_DIAMETER;
    let interface = length / 2.0;
    let h = length / n as f64;
    let d = 2 * (n + 1);
    let bending = beam_bending_matrix(effective_rigidity, h);
    let sand = winkler_foundation_matrix(K_SAND, h);
    let clay = winkler_foundation_matrix(K_CLAY, h);
    let integrals = cubic_load_integrals(h);

    let mut stiffness = DMatrix::zeros(d, d);
    let mut load_map = DMatrix::zeros(d, n);
    let mut midpoints = Vec::with_capacity(n);
    for e in 0..n {
        let mid = (e as f64 + 0.5) * h;
        midpoints.push(mid);
        let foundation = if mid < interface { &sand } else { &clay };
        let base = 2 * e;
        for a in 0..4 {
            for b in 0..4 {
                stiffness[(base + a, base + b)] += bending[a][b] + foundation[a][b];
            }
            load_map[(base + a, e)] += integrals[a];
        }
    }
    let labels = (0..d)
        .map(|i| DofLabel {
            kind: if i % 2 == 0 { DofKind::Translation } else { DofKind::Rotation },
            z: (i / 2) as f64 * h,
        })
        .collect();
    let system = StaticLinearSystem::new(stiffness, labels)?;
    let field = RandomFieldSpec {
        mean: TUNNEL_LOAD_MEAN,
        std_dev: TUNNEL_LOAD_MEAN,
        correlation_length: length / 2.0,
    };
    let prior = field_prior(&load_map, &field, &midpoints)?;
    Ok(ModelBundle {
        system,
        prior,
        load_map,
        field,
        midpoints,
        constants: ModelConstants::Tunnel {
            length,
            outer_diameter: TUNNEL_OUTER_DIAMETER,
            wall_thickness: TUNNEL_WALL_THICKNESS,
            joint_reduction: TUNNEL_JOINT_REDUCTION,
            youngs_modulus: TUNNEL_YOUNGS_MODULUS,
            second_moment,
            effective_rigidity,
            k_sand: K_SAND,
            k_clay: K_CLAY,
            interface,
            elements: n,
        },
    })
}
