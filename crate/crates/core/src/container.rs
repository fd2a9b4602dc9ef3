//! Versioned JSON container for moving models, bases and reduced problems
//! between the offline and online phases.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{ModelBundle, ModelConstants, RandomFieldSpec};
use crate::forward::{DofLabel, StaticLinearSystem};
use crate::gaussian::GaussianBelief;
use crate::reduction::{ReducedInverseProblem, ReductionBasis};

pub const FORMAT: &str = "lisreduce";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

/// Types that can be stored in a container.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

pub fn to_json<T: Record>(payload: &T) -> Result<String> {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        kind: T::KIND.to_string(),
        payload,
    };
    Ok(serde_json::to_string(&env)?)
}

pub fn from_json<T: Record>(text: &str) -> Result<T> {
    let env: Envelope<serde_json::Value> = serde_json::from_str(text)?;
    if env.format != FORMAT {
        return Err(Error::Config(format!("not a {FORMAT} container (format `{}`)", env.format)));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "container version {} is not supported (expected {FORMAT_VERSION})",
            env.version
        )));
    }
    if env.kind != T::KIND {
        return Err(Error::Config(format!("container holds a {}, expected a {}", env.kind, T::KIND)));
    }
    Ok(serde_json::from_value(env.payload)?)
}

pub fn save<T: Record>(path: impl AsRef<Path>, payload: &T) -> Result<()> {
    fs::write(path, to_json(payload)?)?;
    Ok(())
}

pub fn load<T: Record>(path: impl AsRef<Path>) -> Result<T> {
    from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub mean: DVector<f64>,
    pub sqrt_factor: DMatrix<f64>,
}

impl From<&GaussianBelief> for BeliefRecord {
    fn from(b: &GaussianBelief) -> Self {
        BeliefRecord {
            mean: b.mean().clone(),
            sqrt_factor: b.sqrt_factor().clone(),
        }
    }
}

impl BeliefRecord {
    pub fn into_belief(self) -> Result<GaussianBelief> {
        GaussianBelief::new(self.mean, self.sqrt_factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub constants: ModelConstants,
    pub field: RandomFieldSpec,
    pub stiffness: DMatrix<f64>,
    pub labels: Vec<DofLabel>,
    pub load_map: DMatrix<f64>,
    pub midpoints: Vec<f64>,
    pub prior: BeliefRecord,
}

impl Record for ModelRecord {
    const KIND: &'static str = "model";
}

impl From<&ModelBundle> for ModelRecord {
    fn from(m: &ModelBundle) -> Self {
        ModelRecord {
            constants: m.constants,
            field: m.field,
            stiffness: m.system.stiffness().clone(),
            labels: m.system.labels().to_vec(),
            load_map: m.load_map.clone(),
            midpoints: m.midpoints.clone(),
            prior: (&m.prior).into(),
        }
    }
}

impl ModelRecord {
    pub fn into_bundle(self) -> Result<ModelBundle> {
        Ok(ModelBundle {
            system: StaticLinearSystem::new(self.stiffness, self.labels)?,
            prior: self.prior.into_belief()?,
            load_map: self.load_map,
            field: self.field,
            midpoints: self.midpoints,
            constants: self.constants,
        })
    }
}

impl Record for ReductionBasis {
    const KIND: &'static str = "basis";
}

/// Everything the online phase needs: reduced operators plus the full prior
/// and noise used for lifting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedRecord {
    pub basis: ReductionBasis,
    pub k_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub g_hat: DMatrix<f64>,
    pub prior: BeliefRecord,
    pub noise: BeliefRecord,
}

impl Record for ReducedRecord {
    const KIND: &'static str = "reduced";
}

impl ReducedRecord {
    pub fn new(red: &ReducedInverseProblem, noise: &GaussianBelief) -> Self {
        ReducedRecord {
            basis: red.basis().clone(),
            k_hat: red.k_hat().clone(),
            c_hat: red.c_hat().clone(),
            g_hat: red.g_hat().clone(),
            prior: red.update().prior().as_ref().into(),
            noise: noise.into(),
        }
    }

    /// Rebuilds the reduced problem; `Ĝ` is recomputed from `K̂` and `Ĉ` and
    /// checked against the stored copy.
    pub fn into_problem(self) -> Result<ReducedInverseProblem> {
        let prior = Arc::new(self.prior.into_belief()?);
        let noise = self.noise.into_belief()?;
        let red = ReducedInverseProblem::from_parts(self.basis, self.k_hat, self.c_hat, prior, &noise)?;
        let scale = self.g_hat.norm().max(f64::MIN_POSITIVE);
        if red.g_hat().shape() != self.g_hat.shape() || (red.g_hat() - &self.g_hat).norm() > 1e-10 * scale {
            return Err(Error::Config("stored reduced forward operator is inconsistent with K̂ and Ĉ".into()));
        }
        Ok(red)
    }
}
