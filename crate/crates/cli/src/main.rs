//! `lisreduce` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use lisreduce_core::container::{self, ModelRecord, ReducedRecord};
use lisreduce_core::experiment::{
    emit_report, pod_snapshot_sweep, replication_rng, report_to_csv, run_experiment, ExperimentConfig, Method,
    ModelKind, ReportFormat, Seeds,
};
use lisreduce_core::gaussian::ConjugateUpdate;
use lisreduce_core::mm;
use lisreduce_core::reduction::{
    collect_snapshots, lis_basis, pod_basis, reduce_petrov_galerkin, MeanLifting, OlrApproximation,
    ReducedInverseProblem, ReductionBasis,
};
use lisreduce_core::{Error, LinearForwardProblem, Result};

#[derive(Parser)]
#[command(name = "lisreduce", version, about = "Likelihood-informed model reduction for static load inference")]
struct Cli {
    /// Global fallback seed; seeds not given explicitly derive from it.
    #[arg(long, env = "LISREDUCE_SEED", global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a finite element model and store it in a container.
    BuildModel {
        #[arg(value_enum)]
        model: ModelArg,
        /// Number of finite elements.
        #[arg(long)]
        n: Option<usize>,
        /// Container file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for Matrix Market exports of K, C, G, the load map and the prior.
        #[arg(long)]
        export_mm: Option<PathBuf>,
        /// Observation count used for the exported C and G.
        #[arg(long, default_value_t = 10)]
        m: usize,
    },
    /// Compute a reduction basis and the reduced inverse problem.
    Basis {
        #[arg(value_enum)]
        kind: BasisArg,
        #[arg(long)]
        r: usize,
        /// POD snapshot count.
        #[arg(long, default_value_t = 10)]
        snapshots: usize,
        #[command(flatten)]
        problem: ProblemArgs,
        /// Container file for the reduced problem.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for Matrix Market exports of V, W, K̂, Ĉ and Ĝ.
        #[arg(long)]
        export_mm: Option<PathBuf>,
    },
    /// Draw synthetic data `y = C K⁻¹ f + ε` with `f` from the prior.
    GenerateData {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Replication index (stream of the data seed).
        #[arg(long, default_value_t = 0)]
        replication: usize,
        /// Matrix Market file for `y`.
        #[arg(long)]
        out: PathBuf,
        /// Optional Matrix Market file for the true load.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Posterior mean for one data vector.
    Solve {
        #[arg(long, value_enum)]
        method: SolveMethod,
        /// Rank of the approximation (ignored for `exact`).
        #[arg(long, default_value_t = 10)]
        r: usize,
        /// Data vector: Matrix Market, or whitespace-separated numbers.
        #[arg(long)]
        data: PathBuf,
        /// Reduced-problem container from `basis`; skips the offline phase.
        #[arg(long)]
        reduced: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        snapshots: usize,
        #[arg(long, value_enum, default_value_t = LiftArg::Affine)]
        lifting: LiftArg,
        #[command(flatten)]
        problem: ProblemArgs,
        /// Matrix Market file for the posterior mean (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a replicated error study.
    Experiment {
        /// JSON config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        replications: Option<usize>,
        /// Comma-separated ranks.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        /// Comma-separated subset of lis,pod,olr.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        snapshots: Option<usize>,
        /// Record wall-clock timings (makes output non-reproducible).
        #[arg(long)]
        timings: bool,
        /// Output directory (report printed as CSV to stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// POD study over snapshot counts.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        replications: Option<usize>,
        /// Comma-separated snapshot counts.
        #[arg(long, value_delimiter = ',', default_value = "10,20,50,100,200,500,1000")]
        counts: Vec<usize>,
        /// Output JSON file (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct ProblemArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Bar)]
    model: ModelArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 1e-5)]
    noise_var: f64,
    #[arg(long)]
    locations_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    snapshots_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Bar,
    Tunnel,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Bar => ModelKind::Bar,
            ModelArg::Tunnel => ModelKind::Tunnel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Lis,
    Pod,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Lis,
    Pod,
    Olr,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum LiftArg {
    Affine,
    Subspace,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

fn seeds(global: Option<u64>, p: &ProblemArgs) -> Seeds {
    let base = global.map(Seeds::from_global).unwrap_or_default();
    Seeds {
        locations: p.locations_seed.unwrap_or(base.locations),
        data: p.data_seed.unwrap_or(base.data),
        snapshots: p.snapshots_seed.unwrap_or(base.snapshots),
    }
}

fn problem_config(global: Option<u64>, p: &ProblemArgs) -> ExperimentConfig {
    ExperimentConfig {
        model: p.model.into(),
        elements: p.n,
        m: p.m,
        noise_var: p.noise_var,
        ranks: vec![1],
        seeds: seeds(global, p),
        ..Default::default()
    }
}

fn build_problem(global: Option<u64>, p: &ProblemArgs) -> Result<LinearForwardProblem> {
    let cfg = problem_config(global, p);
    cfg.validate()?;
    Ok(cfg.build_problem()?.1)
}

fn export(dir: &Path, files: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, m) in files {
        mm::write_matrix_file(dir.join(format!("{name}.mtx")), m)?;
    }
    Ok(())
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with("%%MatrixMarket") {
        let m = mm::parse_matrix(&text)?;
        if m.ncols() != 1 {
            return Err(Error::InvalidArgument(format!(
                "data file must hold a column vector, found {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        return Ok(m.column(0).into_owned());
    }
    let values = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number `{t}` in data file"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(values))
}

fn write_or_print(out: Option<&Path>, m: &DMatrix<f64>) -> Result<()> {
    match out {
        Some(path) => mm::write_matrix_file(path, m),
        None => {
            let mut buf = Vec::new();
            mm::write_matrix(&mut buf, m)?;
            print!("{}", String::from_utf8_lossy(&buf));
            Ok(())
        }
    }
}

fn experiment_config(global: Option<u64>, path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?, global),
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Some(s) = global {
                cfg.seeds = Seeds::from_global(s);
            }
            Ok(cfg)
        }
    }
}

fn reduced_for(
    kind: BasisArg,
    r: usize,
    snapshots: usize,
    prob: &LinearForwardProblem,
    snapshot_seed: u64,
) -> Result<ReducedInverseProblem> {
    let basis = basis_for(kind, r, snapshots, prob, snapshot_seed)?;
    reduce_petrov_galerkin(prob, &basis)
}

fn basis_for(
    kind: BasisArg,
    r: usize,
    snapshots: usize,
    prob: &LinearForwardProblem,
    snapshot_seed: u64,
) -> Result<ReductionBasis> {
    match kind {
        BasisArg::Lis => lis_basis(
            prob.forward_matrix()?,
            prob.prior().sqrt_factor(),
            prob.noise().sqrt_factor(),
            r,
        ),
        BasisArg::Pod => {
            let mut rng = replication_rng(snapshot_seed, 0);
            let snaps = collect_snapshots(prob, snapshots, &mut rng)?;
            pod_basis(&snaps, r)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let global = cli.seed;
    match cli.command {
        Command::BuildModel {
            model,
            n,
            out,
            export_mm,
            m,
        } => {
            let p = ProblemArgs {
                model,
                n,
                m,
                noise_var: 1e-5,
                locations_seed: None,
                data_seed: None,
                snapshots_seed: None,
            };
            let cfg = problem_config(global, &p);
            cfg.validate()?;
            let (bundle, prob) = cfg.build_problem()?;
            println!(
                "model={:?} dofs={} elements={} translational={}",
                cfg.model,
                bundle.dim(),
                bundle.midpoints.len(),
                bundle.system.translational_dofs().len()
            );
            if let Some(path) = out {
                container::save(&path, &ModelRecord::from(&bundle))?;
            }
            if let Some(dir) = export_mm {
                let c = prob.observations().matrix(prob.state_dim());
                export(
                    &dir,
                    &[
                        ("K", bundle.system.stiffness()),
                        ("C", &c),
                        ("G", prob.forward_matrix()?),
                        ("load_map", &bundle.load_map),
                        ("prior_mean", &column(bundle.prior.mean())),
                        ("prior_sqrt", bundle.prior.sqrt_factor()),
                    ],
                )?;
            }
        }
        Command::Basis {
            kind,
            r,
            snapshots,
            problem,
            out,
            export_mm,
        } => {
            let prob = build_problem(global, &problem)?;
            let seeds = seeds(global, &problem);
            let red = reduced_for(kind, r, snapshots, &prob, seeds.snapshots)?;
            let values: Vec<String> = red.basis().values().iter().map(|v| format!("{v:.6e}")).collect();
            println!("values={}", values.join(","));
            println!("biorthogonality_defect={:.3e}", red.basis().biorthogonality_defect());
            if let Some(path) = out {
                container::save(&path, &ReducedRecord::new(&red, prob.noise()))?;
            }
            if let Some(dir) = export_mm {
                export(
                    &dir,
                    &[
                        ("V", red.basis().trial()),
                        ("W", red.basis().test()),
                        ("K_hat", red.k_hat()),
                        ("C_hat", red.c_hat()),
                        ("G_hat", red.g_hat()),
                    ],
                )?;
            }
        }
        Command::GenerateData {
            problem,
            replication,
            out,
            truth,
        } => {
            let prob = build_problem(global, &problem)?;
            let mut rng = replication_rng(seeds(global, &problem).data, replication);
            let (f, y) = prob.generate_data(&mut rng)?;
            mm::write_matrix_file(&out, &column(&y))?;
            if let Some(path) = truth {
                mm::write_matrix_file(path, &column(&f))?;
            }
        }
        Command::Solve {
            method,
            r,
            data,
            reduced,
            snapshots,
            lifting,
            problem,
            out,
        } => {
            let y = read_vector(&data)?;
            let lifting = match lifting {
                LiftArg::Affine => MeanLifting::Affine,
                LiftArg::Subspace => MeanLifting::Subspace,
            };
            let mean = if let Some(path) = reduced {
                if matches!(method, SolveMethod::Olr | SolveMethod::Exact) {
                    return Err(Error::InvalidArgument(
                        "--reduced only applies to the lis and pod methods".into(),
                    ));
                }
                let red = container::load::<ReducedRecord>(&path)?.into_problem()?;
                red.posterior(&y, lifting)?.mean
            } else {
                let prob = build_problem(global, &problem)?;
                let snapshot_seed = seeds(global, &problem).snapshots;
                match method {
                    SolveMethod::Exact => {
                        let update = ConjugateUpdate::new(
                            Arc::clone(prob.prior()),
                            prob.forward_matrix()?,
                            prob.noise(),
                        )?;
                        update.mean(&y)?
                    }
                    SolveMethod::Lis => reduced_for(BasisArg::Lis, r, snapshots, &prob, snapshot_seed)?
                        .posterior(&y, lifting)?
                        .mean,
                    SolveMethod::Pod => reduced_for(BasisArg::Pod, r, snapshots, &prob, snapshot_seed)?
                        .posterior(&y, lifting)?
                        .mean,
                    SolveMethod::Olr => {
                        let basis = basis_for(BasisArg::Lis, r, snapshots, &prob, snapshot_seed)?;
                        OlrApproximation::new(&prob, &basis)?.posterior(&y)?.mean
                    }
                }
            };
            write_or_print(out.as_deref(), &column(&mean))?;
        }
        Command::Experiment {
            config,
            model,
            replications,
            ranks,
            methods,
            snapshots,
            timings,
            out,
            format,
        } => {
            let mut cfg = experiment_config(global, config.as_deref())?;
            if let Some(m) = model {
                cfg.model = m.into();
            }
            if let Some(n) = replications {
                cfg.replications = n;
            }
            if let Some(r) = ranks {
                cfg.ranks = r;
            }
            if let Some(ms) = methods {
                cfg.methods = ms.iter().map(|s| s.parse::<Method>()).collect::<Result<_>>()?;
            }
            if let Some(n) = snapshots {
                cfg.pod_snapshots = n;
            }
            cfg.timings |= timings;
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    let (name, fmt) = match format {
                        FormatArg::Csv => ("report.csv", ReportFormat::Csv),
                        FormatArg::Json => ("report.json", ReportFormat::Json),
                    };
                    emit_report(&report, dir.join(name), fmt)?;
                }
                None => print!("{}", report_to_csv(&report)),
            }
        }
        Command::Sweep {
            config,
            model,
            replications,
            counts,
            out,
        } => {
            let mut cfg = experiment_config(global, config.as_deref())?;
            if let Some(m) = model {
                cfg.model = m.into();
            }
            if let Some(n) = replications {
                cfg.replications = n;
            }
            cfg.validate()?;
            let sweep = pod_snapshot_sweep(&cfg, &counts)?;
            let text = serde_json::to_string_pretty(&sweep)?;
            match out {
                Some(path) => fs::write(path, text)?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(locations: Option<u64>) -> ProblemArgs {
        ProblemArgs {
            model: ModelArg::Bar,
            n: None,
            m: 10,
            noise_var: 1e-5,
            locations_seed: locations,
            data_seed: None,
            snapshots_seed: None,
        }
    }

    #[test]
    fn explicit_seeds_override_global() {
        let s = seeds(Some(10), &problem(Some(4)));
        assert_eq!((s.locations, s.data, s.snapshots), (4, 11, 12));
        assert_eq!(seeds(None, &problem(None)), Seeds::default());
    }

    #[test]
    fn plain_text_vectors_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.txt");
        fs::write(&p, "1.5 -2\n3e-1\n").unwrap();
        assert_eq!(read_vector(&p).unwrap(), DVector::from_vec(vec![1.5, -2.0, 0.3]));
        fs::write(&p, "1.5 abc").unwrap();
        assert!(matches!(read_vector(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
