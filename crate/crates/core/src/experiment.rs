//! Replicated posterior-approximation experiments on the bar and tunnel
//! models, their error metrics and report files.
//!
//! Randomness comes from three independent seeds: observation locations,
//! data realizations and POD snapshots. Replication `i` draws its data from
//! stream `i` of the data seed, so results do not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{build_bar, build_tunnel, ModelBundle};
use crate::forward::{draw_observation_indices, LinearForwardProblem};
use crate::gaussian::{foerstner_between, ConjugateUpdate, GaussianBelief, LowRankDowndate, DEFAULT_NULL_TOL};
use crate::linalg::{compensated_sum, ThinSvd};
use crate::reduction::{
    collect_snapshots, lis_achievable_rank, lis_basis, pod_basis, reduce_petrov_galerkin, MeanLifting,
    OlrApproximation, PosteriorApproximation, ReducedInverseProblem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bar,
    Tunnel,
}

impl ModelKind {
    pub fn default_elements(self) -> usize {
        match self {
            ModelKind::Bar => 100,
            ModelKind::Tunnel => 800,
        }
    }

    pub fn build(self, elements: usize) -> Result<ModelBundle> {
        match self {
            ModelKind::Bar => build_bar(elements),
            ModelKind::Tunnel => build_tunnel(elements),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lis,
    Pod,
    Olr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lis => "lis",
            Method::Pod => "pod",
            Method::Olr => "olr",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lis" => Ok(Method::Lis),
            "pod" => Ok(Method::Pod),
            "olr" => Ok(Method::Olr),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub locations: u64,
    pub data: u64,
    pub snapshots: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            locations: 1,
            data: 2,
            snapshots: 3,
        }
    }
}

impl Seeds {
    /// Seeds derived from a single global seed.
    pub fn from_global(seed: u64) -> Self {
        Seeds {
            locations: seed,
            data: seed.wrapping_add(1),
            snapshots: seed.wrapping_add(2),
        }
    }
}

/// Generator for replication `i` of a seed role.
pub fn replication_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    /// Finite element count; the model default when absent.
    pub elements: Option<usize>,
    pub m: usize,
    pub noise_var: f64,
    pub replications: usize,
    pub ranks: Vec<usize>,
    pub methods: Vec<Method>,
    pub pod_snapshots: usize,
    pub seeds: Seeds,
    pub mean_lifting: MeanLifting,
    pub null_tol: f64,
    /// Record wall-clock timings. Off by default so reports are byte-reproducible.
    pub timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Bar,
            elements: None,
            m: 10,
            noise_var: 1e-5,
            replications: 200,
            ranks: (1..=10).collect(),
            methods: vec![Method::Lis, Method::Pod, Method::Olr],
            pod_snapshots: 10,
            seeds: Seeds::default(),
            mean_lifting: MeanLifting::Affine,
            null_tol: DEFAULT_NULL_TOL,
            timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn for_model(model: ModelKind) -> Self {
        ExperimentConfig {
            model,
            ..Default::default()
        }
    }

    /// Parses a JSON config. When the document has no `seeds` entry and
    /// `fallback_seed` is given, all three seeds derive from it.
    pub fn from_json(text: &str, fallback_seed: Option<u64>) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let has_seeds = raw.get("seeds").is_some();
        let mut cfg: ExperimentConfig =
            serde_json::from_value(raw).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if !has_seeds {
            if let Some(seed) = fallback_seed {
                cfg.seeds = Seeds::from_global(seed);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn elements(&self) -> usize {
        self.elements.unwrap_or_else(|| self.model.default_elements())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m == 0 {
            return fail("m must be positive".into());
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return fail(format!("noise_var must be positive and finite, got {}", self.noise_var));
        }
        if self.replications == 0 {
            return fail("replications must be positive".into());
        }
        if self.ranks.is_empty() {
            return fail("ranks must not be empty".into());
        }
        if let Some(&r) = self.ranks.iter().find(|&&r| r == 0 || r > self.m) {
            return fail(format!("rank {r} outside 1..={}", self.m));
        }
        if self.methods.is_empty() {
            return fail("methods must not be empty".into());
        }
        if self.pod_snapshots == 0 {
            return fail("pod_snapshots must be positive".into());
        }
        if !(self.null_tol > 0.0 && self.null_tol < 1.0) {
            return fail(format!("null_tol must lie in (0, 1), got {}", self.null_tol));
        }
        let n = self.elements();
        match self.model {
            ModelKind::Bar if n < 2 => fail(format!("bar needs at least 2 elements, got {n}")),
            ModelKind::Tunnel if n == 0 || !n.is_multiple_of(2) => fail(format!("tunnel needs an even element count, got {n}")),
            _ => Ok(()),
        }
    }

    /// The model and the inverse problem with observation locations drawn
    /// from the locations seed.
    pub fn build_problem(&self) -> Result<(ModelBundle, LinearForwardProblem)> {
        let bundle = self.model.build(self.elements())?;
        let mut loc_rng = ChaCha8Rng::seed_from_u64(self.seeds.locations);
        let obs = draw_observation_indices(&bundle.system, self.m, &mut loc_rng)?;
        let problem = LinearForwardProblem::new(
            bundle.system.clone(),
            obs,
            Arc::new(bundle.prior.clone()),
            GaussianBelief::isotropic(self.m, self.noise_var)?,
        )?;
        Ok((bundle, problem))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// `(1/N) Σ ‖μ*⁽ⁱ⁾ − μ⁽ⁱ⁾‖₂ / ‖μ⁽ⁱ⁾‖₂`, accumulated in index order with compensation.
pub fn mean_error_metric(approx: &[DVector<f64>], exact: &[DVector<f64>]) -> Result<f64> {
    if approx.len() != exact.len() {
        return Err(Error::DimensionMismatch {
            context: "replication count",
            expected: exact.len(),
            found: approx.len(),
        });
    }
    if exact.is_empty() {
        return Err(Error::InvalidArgument("mean error over zero replications".into()));
    }
    let mut terms = Vec::with_capacity(exact.len());
    for (i, (a, e)) in approx.iter().zip(exact).enumerate() {
        if a.len() != e.len() {
            return Err(Error::DimensionMismatch {
                context: "posterior mean length",
                expected: e.len(),
                found: a.len(),
            });
        }
        let norm = e.norm();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(format!("reference mean of replication {i} is zero")));
        }
        terms.push((a - e).norm() / norm);
    }
    Ok(compensated_sum(terms) / exact.len() as f64)
}

/// Model, frozen observation locations, data realizations and exact posteriors
/// shared by every cell of an experiment.
#[derive(Debug)]
pub struct ExperimentSetup {
    pub config: ExperimentConfig,
    pub bundle: ModelBundle,
    pub problem: LinearForwardProblem,
    pub exact: ConjugateUpdate,
    pub data: Vec<DVector<f64>>,
    pub exact_means: Vec<DVector<f64>>,
    /// Rows on which covariances are compared (the translational dofs).
    pub covariance_rows: Vec<usize>,
    pub setup_s: f64,
}

impl ExperimentSetup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let start = Instant::now();
        let (bundle, problem) = config.build_problem()?;
        let g = problem.forward_matrix()?;
        let exact = ConjugateUpdate::new(problem.prior().clone(), g, problem.noise())?;
        let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..config.replications)
            .into_par_iter()
            .map(|i| {
                let mut rng = replication_rng(config.seeds.data, i);
                let (_, y) = problem.generate_data(&mut rng)?;
                let mean = exact.mean(&y)?;
                Ok((y, mean))
            })
            .collect::<Result<_>>()?;
        let (data, exact_means) = pairs.into_iter().unzip();
        let covariance_rows = bundle.system.translational_dofs();
        Ok(ExperimentSetup {
            config: config.clone(),
            bundle,
            problem,
            exact,
            data,
            exact_means,
            covariance_rows,
            setup_s: if config.timings { start.elapsed().as_secs_f64() } else { 0.0 },
        })
    }

    pub fn exact_covariance(&self) -> &Arc<LowRankDowndate> {
        self.exact.downdate()
    }

    /// Builds the offline part of one method at rank `r`.
    pub fn approximator(&self, method: Method, r: usize, snapshots: usize) -> Result<Approximator> {
        let prob = &self.problem;
        let built = match method {
            Method::Lis | Method::Olr => {
                let basis = lis_basis(
                    prob.forward_matrix()?,
                    prob.prior().sqrt_factor(),
                    prob.noise().sqrt_factor(),
                    r,
                )?;
                if method == Method::Lis {
                    Approximator::Reduced(reduce_petrov_galerkin(prob, &basis)?, self.config.mean_lifting)
                } else {
                    Approximator::Olr(OlrApproximation::new(prob, &basis)?)
                }
            }
            Method::Pod => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seeds.snapshots);
                let snaps = collect_snapshots(prob, snapshots, &mut rng)?;
                let basis = pod_basis(&snaps, r)?;
                Approximator::Reduced(reduce_petrov_galerkin(prob, &basis)?, self.config.mean_lifting)
            }
        };
        Ok(built)
    }

    fn evaluate(&self, method: Method, r: usize, snapshots: usize) -> Result<ReportRow> {
        let annotate = |e: Error, rep: Option<usize>| e.annotate(method.as_str(), r, rep);
        let start = Instant::now();
        let approx = self.approximator(method, r, snapshots).map_err(|e| annotate(e, None))?;
        let offline = start.elapsed().as_secs_f64();

        let run_one = |i: usize| -> Result<(DVector<f64>, f64)> {
            let t = Instant::now();
            let post = approx.posterior(&self.data[i]).map_err(|e| annotate(e, Some(i)))?;
            Ok((post.mean, t.elapsed().as_secs_f64()))
        };
        let n = self.data.len();
        let results: Vec<(DVector<f64>, f64)> = if self.config.timings {
            (0..n).map(run_one).collect::<Result<_>>()?
        } else {
            (0..n).into_par_iter().map(run_one).collect::<Result<_>>()?
        };
        let (means, mut times): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let mean_rel_error = mean_error_metric(&means, &self.exact_means).map_err(|e| annotate(e, None))?;
        let foerstner = foerstner_between(
            &approx.covariance(),
            self.exact_covariance(),
            Some(&self.covariance_rows),
            self.config.null_tol,
        )
        .map_err(|e| annotate(e, None))?;
        times.sort_by(f64::total_cmp);
        let timed = self.config.timings;
        Ok(ReportRow {
            method,
            r,
            mean_rel_error,
            foerstner,
            offline_s: if timed { offline } else { 0.0 },
            online_s: if timed { times[times.len() / 2] } else { 0.0 },
        })
    }

    fn metadata(&self) -> Result<ReportMetadata> {
        let prob = &self.problem;
        let g = prob.forward_matrix()?;
        let achievable = lis_achievable_rank(g, prob.prior().sqrt_factor(), prob.noise().sqrt_factor())?;
        let full = lis_basis(g, prob.prior().sqrt_factor(), prob.noise().sqrt_factor(), achievable)?;
        let mut discrepancy = Vec::new();
        if self.config.methods.contains(&Method::Lis) {
            for &r in &self.config.ranks {
                if r <= achievable {
                    let red = reduce_petrov_galerkin(prob, &full.truncate(r)?)?;
                    discrepancy.push(RankValue {
                        r,
                        value: red.operator_discrepancy(g)?,
                    });
                }
            }
        }
        let pod_singular_values = if self.config.methods.contains(&Method::Pod) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seeds.snapshots);
            let snaps = collect_snapshots(prob, self.config.pod_snapshots, &mut rng)?;
            ThinSvd::new(&snaps)?.singular_values.iter().copied().collect()
        } else {
            Vec::new()
        };
        Ok(ReportMetadata {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            state_dim: prob.state_dim(),
            observed_dofs: prob.observations().indices().to_vec(),
            signal_to_noise: prob.signal_to_noise()?,
            lis_singular_values: full.values().iter().copied().collect(),
            pod_singular_values,
            lis_operator_discrepancy: discrepancy,
            setup_s: self.setup_s,
        })
    }
}

/// Offline product of one method, ready for per-data posterior solves.
#[derive(Debug, Clone)]
pub enum Approximator {
    Reduced(ReducedInverseProblem, MeanLifting),
    Olr(OlrApproximation),
}

impl Approximator {
    pub fn posterior(&self, y: &DVector<f64>) -> Result<PosteriorApproximation> {
        match self {
            Approximator::Reduced(red, lifting) => red.posterior(y, *lifting),
            Approximator::Olr(olr) => olr.posterior(y),
        }
    }

    pub fn covariance(&self) -> Arc<LowRankDowndate> {
        match self {
            Approximator::Reduced(red, _) => red.update().downdate().clone(),
            Approximator::Olr(olr) => olr.update().downdate().clone(),
        }
    }
}

mod float_repr {
    //! Finite floats as JSON numbers, non-finite ones as strings.
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub r: usize,
    pub mean_rel_error: f64,
    #[serde(with = "float_repr")]
    pub foerstner: f64,
    pub offline_s: f64,
    pub online_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankValue {
    pub r: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub state_dim: usize,
    pub observed_dofs: Vec<usize>,
    /// Average over observations of `var(Cu) / var(Cu + ε)`.
    pub signal_to_noise: f64,
    pub lis_singular_values: Vec<f64>,
    pub pod_singular_values: Vec<f64>,
    /// `‖Ĝ Wᵀ − G V Wᵀ‖_F / ‖G V Wᵀ‖_F` of the LIS reduced model per rank.
    pub lis_operator_discrepancy: Vec<RankValue>,
    pub setup_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub metadata: Option<ReportMetadata>,
    pub rows: Vec<ReportRow>,
}

impl ErrorReport {
    pub fn row(&self, method: Method, r: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|row| row.method == method && row.r == r)
    }

    /// `(r, mean_rel_error)` pairs of one method in rank order.
    pub fn mean_errors(&self, method: Method) -> Vec<(usize, f64)> {
        let mut v: Vec<_> = self
            .rows
            .iter()
            .filter(|row| row.method == method)
            .map(|row| (row.r, row.mean_rel_error))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }
}

/// Runs every (method, rank) cell of the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ErrorReport> {
    let setup = ExperimentSetup::new(cfg)?;
    run_on_setup(&setup)
}

pub fn run_on_setup(setup: &ExperimentSetup) -> Result<ErrorReport> {
    let cfg = &setup.config;
    let cells: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.ranks.iter().map(move |&r| (m, r)))
        .collect();
    let eval = |&(m, r): &(Method, usize)| setup.evaluate(m, r, cfg.pod_snapshots);
    let rows: Vec<ReportRow> = if cfg.timings {
        cells.iter().map(eval).collect::<Result<_>>()?
    } else {
        cells.par_iter().map(eval).collect::<Result<_>>()?
    };
    Ok(ErrorReport {
        metadata: Some(setup.metadata()?),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub snapshots: usize,
    /// Leading singular values of the snapshot matrix.
    pub singular_values: Vec<f64>,
    /// Mean of `‖u − Φ_r Φ_rᵀ u‖₂` over the held-out test states, per rank.
    pub projection_error: Vec<RankValue>,
    /// POD posterior errors per rank (ranks capped at the snapshot count).
    pub rows: Vec<ReportRow>,
}

pub const SWEEP_TEST_STATES: usize = 200;

/// POD study over snapshot counts. Snapshot sets are nested: the first `N`
/// draws of the snapshot stream are shared by every larger `N`. Held-out
/// test states come from a separate stream of the snapshot seed.
pub fn pod_snapshot_sweep(cfg: &ExperimentConfig, counts: &[usize]) -> Result<Vec<SweepEntry>> {
    let setup = ExperimentSetup::new(cfg)?;
    let prob = &setup.problem;
    let mut test_rng = replication_rng(cfg.seeds.snapshots, 1);
    let test_states = collect_snapshots(prob, SWEEP_TEST_STATES, &mut test_rng)?;
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Config("snapshot counts must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.snapshots);
            let snaps = collect_snapshots(prob, n, &mut rng)?;
            let svd = ThinSvd::new(&snaps)?;
            let achievable = svd.numerical_rank();
            let mut ranks: Vec<usize> = cfg.ranks.iter().map(|&r| r.min(achievable)).collect();
            ranks.dedup();
            let mut projection_error = Vec::new();
            let mut rows = Vec::new();
            for &r in &ranks {
                let basis = pod_basis(&snaps, r)?;
                let phi = basis.trial();
                let resid = &test_states - phi * (phi.transpose() * &test_states);
                let errs = resid.column_iter().map(|c| c.norm());
                projection_error.push(RankValue {
                    r,
                    value: compensated_sum(errs) / SWEEP_TEST_STATES as f64,
                });
                rows.push(setup.evaluate(Method::Pod, r, n)?);
            }
            Ok(SweepEntry {
                snapshots: n,
                singular_values: svd.singular_values.iter().copied().collect(),
                projection_error,
                rows,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: &str = "method,r,mean_rel_error,foerstner,offline_s,online_s";

fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn report_to_csv(report: &ErrorReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.method.as_str(),
            row.r,
            fmt_float(row.mean_rel_error),
            fmt_float(row.foerstner),
            fmt_float(row.offline_s),
            fmt_float(row.online_s)
        );
    }
    out
}

pub fn report_to_json(report: &ErrorReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn report_from_json(text: &str) -> Result<ErrorReport> {
    Ok(serde_json::from_str(text)?)
}

pub fn emit_report(report: &ErrorReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Json => report_to_json(report)?,
    };
    fs::write(path, text)?;
    Ok(())
}
