//! Command-line entry point: dataset generation, training, solving,
//! simulation, and batch evaluation with reproducible configs.

use clap::{Parser, Subcommand, ValueEnum};
use micp_nav::admm::AdmmMode;
use micp_nav::config::RunConfig;
use micp_nav::gat::{load_model, save_model, train, write_metrics_csv, ModelFile};
use micp_nav::micp::build_instance;
use micp_nav::oracle::{
    branch_and_bound, enumerate_exhaustive, generate_dataset, load_dataset, load_manifest,
};
use micp_nav::scene::{build_graph, random_scenario, Scene};
use micp_nav::sim::{
    evaluate_batch, run_episode, EvalScenario, PlannerContext, PlannerMode, SimError,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "micp-nav",
    about = "Multi-robot navigation: mixed-integer planning, learned binary strategies, and distributed ADMM",
    version
)]
struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    /// Exact branch-and-bound binaries, centralized convex solve.
    Oracle,
    /// Predicted binaries, centralized convex solve.
    LearnedCentral,
    /// Predicted binaries, distributed proximal ADMM.
    LearnedDist,
}

impl Mode {
    fn planner(self) -> PlannerMode {
        match self {
            Mode::Oracle => PlannerMode::OracleCentralized,
            Mode::LearnedCentral => PlannerMode::LearnedCentralized,
            Mode::LearnedDist => PlannerMode::LearnedDistributed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an oracle-labeled dataset (JSON lines + split manifest).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Scenarios to attempt; infeasible ones are skipped and counted.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the strategy predictor on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `<dataset>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Model output path (JSON container).
        #[arg(long)]
        out: PathBuf,
        /// Metrics history CSV path; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Solve a single scenario file and emit trajectories + binaries.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario JSON: robots, obstacles, workspace.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cross-check the oracle against exhaustive enumeration (small
        /// instances only).
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run seeded closed-loop episodes and dump per-episode results.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        robots: usize,
        #[arg(long, default_value_t = 2)]
        obstacles: usize,
        /// Output directory for episode JSON dumps.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Aggregate success/collision/latency metrics over seeded episodes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        robots: usize,
        #[arg(long, default_value_t = 2)]
        obstacles: usize,
        /// Metrics CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

enum CliError {
    Config(String),
    Io(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Other(m) => m,
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            micp_nav::config::ConfigError::Io(io) => {
                CliError::Io(format!("config {}: {io}", p.display()))
            }
            other => CliError::Config(format!("config {}: {other}", p.display())),
        }),
    }
}

fn init_workers(workers: Option<usize>) {
    if let Some(w) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
}

fn load_model_opt(
    path: &Option<PathBuf>,
    mode: Mode,
) -> Result<Option<ModelFile>, CliError> {
    match (mode, path) {
        (Mode::Oracle, _) => Ok(None),
        (_, None) => Err(CliError::Config(
            "learned modes require --model <file>".into(),
        )),
        (_, Some(p)) => {
            if !p.exists() {
                return Err(CliError::Config(format!("model file {} not found", p.display())));
            }
            load_model(p)
                .map(Some)
                .map_err(|e| CliError::Io(format!("model {}: {e}", p.display())))
        }
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::MissingModel | SimError::HorizonMismatch { .. } => {
            CliError::Config(e.to_string())
        }
        SimError::Io(io) => CliError::Io(io.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_config {
        let text = RunConfig::default()
            .to_toml()
            .map_err(|e| CliError::Other(e.to_string()))?;
        println!("{text}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config(
            "no subcommand given (try --help or --print-config)".into(),
        ));
    };

    match command {
        Command::GenData { config, seed, count, out, workers } => {
            init_workers(workers);
            let cfg = load_config(&config)?;
            if count == 0 {
                return Err(CliError::Config("--count must be at least 1".into()));
            }
            let summary = generate_dataset(&cfg.datagen_config(), count, seed, &out)
                .map_err(|e| match e {
                    micp_nav::oracle::OracleError::Io(io) => CliError::Io(io.to_string()),
                    other => CliError::Other(other.to_string()),
                })?;
            println!(
                "wrote {} records to {} ({} scenarios skipped); manifest: {}",
                summary.manifest.records,
                summary.dataset_path.display(),
                summary.manifest.infeasible_skipped,
                summary.manifest_path.display()
            );
            Ok(())
        }
        Command::Train { config, dataset, manifest, seed, out, metrics, workers } => {
            init_workers(workers);
            let cfg = load_config(&config)?;
            let manifest_path =
                manifest.unwrap_or_else(|| dataset.with_extension("manifest.json"));
            let records = load_dataset(&dataset)
                .map_err(|e| CliError::Io(format!("dataset {}: {e}", dataset.display())))?;
            let manifest = load_manifest(&manifest_path)
                .map_err(|e| CliError::Io(format!("manifest {}: {e}", manifest_path.display())))?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            let outcome = train(&records, &manifest, &train_cfg)
                .map_err(|e| CliError::Other(e.to_string()))?;
            let best = &outcome.history[outcome.best_epoch.saturating_sub(1).min(outcome.history.len() - 1)];
            let model = ModelFile {
                version: 1,
                config_digest: cfg.digest(),
                seed,
                params: outcome.params.clone(),
            };
            save_model(&out, &model).map_err(|e| CliError::Io(e.to_string()))?;
            let metrics_path = metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
            write_metrics_csv(&metrics_path, &outcome.history)
                .map_err(|e| CliError::Io(e.to_string()))?;
            println!(
                "model saved to {} (best epoch {}: bit accuracy RR {:.3} / RO {:.3}); metrics: {}",
                out.display(),
                outcome.best_epoch,
                best.bit_acc_rr,
                best.bit_acc_ro,
                metrics_path.display()
            );
            Ok(())
        }
        Command::Solve { config, scenario, mode, model, out, verify, workers } => {
            init_workers(workers);
            let cfg = load_config(&config)?;
            let text = std::fs::read_to_string(&scenario)
                .map_err(|e| CliError::Io(format!("scenario {}: {e}", scenario.display())))?;
            let scene: Scene = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("scenario {}: {e}", scenario.display())))?;
            let model_file = load_model_opt(&model, mode)?;
            solve_command(&cfg, &scene, mode, model_file.as_ref(), out.as_deref(), verify)
        }
        Command::Simulate { config, seed, n, mode, model, robots, obstacles, out, workers } => {
            init_workers(workers);
            let cfg = load_config(&config)?;
            let model_file = load_model_opt(&model, mode)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Io(format!("out dir {}: {e}", out.display())))?;
            let digest = cfg.digest();
            let params = model_file.as_ref().map(|m| &m.params);
            let ctx = PlannerContext {
                mode: mode.planner(),
                workspace: &cfg.workspace,
                micp: &cfg.micp,
                qp: &cfg.qp,
                bnb: &cfg.bnb,
                admm: &cfg.admm,
                sim: &cfg.sim,
                model: params,
                admm_mode: AdmmMode::Parallel,
            };
            let mut successes = 0usize;
            for ep in 0..n {
                let ep_seed = seed.wrapping_add(ep as u64);
                let (r, o) =
                    random_scenario(robots, obstacles, &cfg.workspace, &cfg.scenario, ep_seed)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                let result = run_episode(&r, &o, &ctx, &digest).map_err(sim_error)?;
                successes += usize::from(result.success);
                let path = out.join(format!("episode_{ep:04}.json"));
                std::fs::write(&path, serde_json::to_string(&result).unwrap())
                    .map_err(|e| CliError::Io(e.to_string()))?;
            }
            println!("{successes}/{n} episodes succeeded; dumps in {}", out.display());
            Ok(())
        }
        Command::Eval { config, seed, n, mode, model, robots, obstacles, out, workers } => {
            init_workers(workers);
            let cfg = load_config(&config)?;
            if n == 0 {
                return Err(CliError::Config("--n must be at least 1".into()));
            }
            let model_file = load_model_opt(&model, mode)?;
            let digest = cfg.digest();
            let params = model_file.as_ref().map(|m| &m.params);
            let ctx = PlannerContext {
                mode: mode.planner(),
                workspace: &cfg.workspace,
                micp: &cfg.micp,
                qp: &cfg.qp,
                bnb: &cfg.bnb,
                admm: &cfg.admm,
                sim: &cfg.sim,
                model: params,
                admm_mode: AdmmMode::Parallel,
            };
            let eval = EvalScenario {
                n_robots: robots,
                n_obstacles: obstacles,
                scenario: cfg.scenario.clone(),
            };
            let metrics = evaluate_batch(&eval, n, seed, &ctx, &digest).map_err(sim_error)?;
            micp_nav::sim::write_metrics_csv(&out, &metrics)
                .map_err(|e| CliError::Io(e.to_string()))?;
            println!(
                "success {:.1}% collision {:.1}% mean latency {:.3}s over {} episodes; csv: {}",
                100.0 * metrics.success_rate,
                100.0 * metrics.collision_rate,
                metrics.mean_latency,
                n,
                out.display()
            );
            Ok(())
        }
    }
}

fn solve_command(
    cfg: &RunConfig,
    scene: &Scene,
    mode: Mode,
    model: Option<&ModelFile>,
    out: Option<&Path>,
    verify: bool,
) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let graph = build_graph(&scene.robots, &scene.obstacles, &scene.workspace);
    let instance =
        build_instance(&scene.robots, &scene.obstacles, &graph, &scene.workspace, &cfg.micp)
            .map_err(|e| CliError::Config(e.to_string()))?;

    let (trajectory, assignment, objective, admm_iterations) = match mode {
        Mode::Oracle => {
            let sol = branch_and_bound(&instance, &cfg.qp, &cfg.bnb)
                .map_err(|e| CliError::Other(e.to_string()))?;
            if verify {
                let exact = enumerate_exhaustive(&instance, &cfg.qp, 1_000_000)
                    .map_err(|e| CliError::Other(format!("verification: {e}")))?;
                let rel = (sol.objective - exact.objective).abs()
                    / exact.objective.abs().max(1.0);
                println!(
                    "verify: branch-and-bound {:.9} vs exhaustive {:.9} (rel {:.2e}, {} QPs)",
                    sol.objective, exact.objective, rel, exact.qp_solves
                );
            }
            (sol.trajectory, sol.assignment, sol.objective, None)
        }
        Mode::LearnedCentral | Mode::LearnedDist => {
            let model = model.ok_or_else(|| {
                CliError::Config("learned modes require --model <file>".into())
            })?;
            if model.params.config.horizon != cfg.micp.horizon {
                return Err(CliError::Config(format!(
                    "model horizon {} does not match configured horizon {}",
                    model.params.config.horizon, cfg.micp.horizon
                )));
            }
            let assignment = micp_nav::gat::predict_binaries(
                &scene.robots,
                &scene.obstacles,
                &graph,
                &model.params,
                cfg.sim.threshold,
            );
            match mode {
                Mode::LearnedCentral => {
                    let qp = instance
                        .fix_binaries(&assignment)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                    let sol = micp_nav::qp::solve_qp(&qp, &cfg.qp)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                    if sol.status != micp_nav::qp::QpStatus::Optimal {
                        return Err(CliError::Other(format!(
                            "predicted binaries made the convex program {:?}; try `simulate`, which applies the slack fallback",
                            sol.status
                        )));
                    }
                    let traj = instance.trajectory_from_primal(&sol.x);
                    (traj, assignment, sol.objective, None)
                }
                Mode::LearnedDist => {
                    let agents = micp_nav::admm::split_problem(&instance, &assignment, None)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                    let result = micp_nav::admm::run_admm(
                        &agents,
                        &cfg.qp,
                        &cfg.admm,
                        AdmmMode::Parallel,
                        None,
                    )
                    .map_err(|e| CliError::Other(e.to_string()))?;
                    let per = instance.inputs_per_robot();
                    let mut stacked =
                        nalgebra::DVector::zeros(per * instance.num_robots());
                    for (r, y) in result.y.iter().enumerate() {
                        stacked.rows_mut(r * per, per).copy_from(&y.rows(0, per));
                    }
                    let traj = instance.trajectory_from_primal(&stacked);
                    (traj, assignment, result.objective, Some(result.iterations))
                }
                Mode::Oracle => unreachable!(),
            }
        }
    };

    let report = instance.check_feasibility(&trajectory, &assignment, 1e-6);
    let output = serde_json::json!({
        "mode": format!("{mode:?}"),
        "objective": objective,
        "trajectories": trajectory,
        "binaries": assignment,
        "feasibility": report,
        "admm_iterations": admm_iterations,
        "timings": { "total_s": started.elapsed().as_secs_f64() },
        "config_digest": cfg.digest(),
    });
    let text = serde_json::to_string_pretty(&output).unwrap();
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Io(format!("output {}: {e}", path.display())))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
