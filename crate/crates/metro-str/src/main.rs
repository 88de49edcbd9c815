use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metro_str::engine::SolverOptions;
use metro_str::headway::HeadwayProblem;
use metro_str::io::{
    default_output_dir, execute_run, load_scenario, RunConfig, RunMode, TraceFormat,
};
use metro_str::oracle::{headway_grid_argmin, regulation_exhaustive, SplitMix64};
use metro_str::regulator::{solve_regulation, RegulationOptions, TrafficState};
use metro_str::scenario::{RunControlBounds, ScenarioBuilder};
use metro_str::timetable::build_nominal_timetable;

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "metro-str",
    about = "Discrete-event metro line simulator with service-oriented traffic regulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one mode and write the trace artifacts.
    Run(RunArgs),
    /// Simulate both modes on identical inputs and write paired artifacts.
    Compare(CompareArgs),
    /// Check a scenario file against every model invariant.
    Validate {
        /// Scenario file (TOML, version str_scenario_v1).
        scenario: PathBuf,
    },
    /// Audit the optimizers against brute-force references on small
    /// deterministic instances.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Regulation mode.
    #[arg(long, value_parser = ["str", "fixed"])]
    mode: String,
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Args)]
struct CompareArgs {
    scenario: PathBuf,
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Epoch of the first scheduled departure, seconds.
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    /// Output directory (default: $STR_OUTPUT_DIR or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace format.
    #[arg(long, default_value = "csv", value_parser = ["csv", "jsonl"])]
    format: String,
    /// Headway optimizer refinement tolerance, seconds.
    #[arg(long, default_value_t = 0.1)]
    pfm_tol: f64,
    /// Regulation solver iteration cap.
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    /// Receding horizon length in trains.
    #[arg(long, default_value_t = 2)]
    horizon_trains: usize,
    /// Reserved for future stochastic extensions; the model itself is
    /// deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CommonRunArgs {
    fn config(&self, scenario: PathBuf, mode: RunMode) -> RunConfig {
        let defaults = SolverOptions::default();
        let solver = SolverOptions {
            pfm_tolerance: self.pfm_tol,
            horizon_trains: self.horizon_trains,
            regulation: metro_str::regulator::RegulationOptions {
                max_iterations: self.max_iters,
                ..defaults.regulation
            },
            ..defaults
        };
        RunConfig {
            scenario_path: scenario,
            mode,
            output_dir: self.out.clone().unwrap_or_else(default_output_dir),
            t0: self.t0,
            trace_format: if self.format == "jsonl" {
                TraceFormat::Jsonl
            } else {
                TraceFormat::Csv
            },
            solver,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct OracleArgs {
    /// Number of randomized headway instances.
    #[arg(long, default_value_t = 25)]
    headway_cases: usize,
    /// Number of randomized regulation instances.
    #[arg(long, default_value_t = 5)]
    regulation_cases: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text; keep exit 0 for --help
            // and --version, 64 for everything else.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match cli.command {
        Command::Validate { scenario } => match load_scenario(&scenario) {
            Ok(s) => {
                println!(
                    "ok: {} ({} stations, {} trains, H={}s, H_min={}s)",
                    s.name, s.n_stations, s.n_trains, s.scheduled_headway, s.min_headway
                );
                ExitCode::from(EXIT_OK)
            }
            Err(e) => {
                eprintln!("invalid scenario: {e}");
                ExitCode::from(EXIT_VALIDATION)
            }
        },
        Command::Run(args) => {
            let mode = if args.mode == "str" {
                RunMode::Str
            } else {
                RunMode::Fixed
            };
            run_and_report(args.common.config(args.scenario, mode))
        }
        Command::Compare(args) => {
            run_and_report(args.common.config(args.scenario, RunMode::Compare))
        }
        Command::Oracle(args) => oracle_command(&args),
    }
}

fn run_and_report(config: RunConfig) -> ExitCode {
    match execute_run(&config) {
        Ok((paths, infeasible)) => {
            for p in &paths {
                println!("wrote {}", p.display());
            }
            if infeasible {
                eprintln!("warning: at least one regulation solve was flagged infeasible");
                ExitCode::from(EXIT_INFEASIBLE)
            } else {
                ExitCode::from(EXIT_OK)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

/// Compares the production optimizers against the brute-force references on
/// deterministic pseudo-random instances and reports worst-case deviations.
fn oracle_command(args: &OracleArgs) -> ExitCode {
    let mut rng = SplitMix64(args.seed);
    let mut worst_dh = 0.0_f64;
    let mut worst_df = 0.0_f64;

    for case in 0..args.headway_cases {
        let stations = rng.range_usize(2, 10);
        let stranded: Vec<f64> = (0..stations).map(|_| rng.range(200.0, 2500.0)).collect();
        let alpha: Vec<f64> = (0..stations).map(|_| rng.range(0.3, 2.5)).collect();
        let beta: Vec<f64> = (0..stations).map(|_| rng.range(0.0, 0.4)).collect();
        let problem = match HeadwayProblem::build(
            1, 1, stranded, alpha, beta, 1860.0, 180.0, 360.0, 360.0, 0.5, 1.5,
        ) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let solved = problem.optimize(0.1);
        let reference = headway_grid_argmin(&problem, 1.0);
        worst_dh = worst_dh.max((solved.headway - reference.headway).abs());
        worst_df = worst_df.max((solved.objective - reference.objective).abs());
        if case == 0 {
            println!(
                "headway case 1: solver {:.3}s (F={:.6}) vs grid {:.3}s (F={:.6})",
                solved.headway, solved.objective, reference.headway, reference.objective
            );
        }
    }
    println!(
        "headway audit over {} cases: worst |dh| = {:.6} s, worst |dF| = {:.3e}",
        args.headway_cases, worst_dh, worst_df
    );

    let mut worst_ratio = 1.0_f64;
    let mut nontrivial = 0usize;
    for _ in 0..args.regulation_cases {
        let dwell = rng.range(10.0, 40.0);
        let scenario = ScenarioBuilder::new(2, 2)
            .nominal_run(vec![120.0])
            .uniform_delay_rate(rng.range(0.0, 0.25))
            .run_control(RunControlBounds::Absolute {
                min: -4.0,
                max: 4.0,
            })
            .dwell_control(-4.0, 4.0)
            .disturbance(1, 1, 0.0, dwell)
            .build()
            .expect("self-check scenario is valid");
        let mut state = TrafficState::new(build_nominal_timetable(&scenario, 0.0));
        // the kick lands on the executed departure; planning sees it as an
        // observed deviation
        state
            .execute_departure(1, 1, 0.0, 0.0, f64::NEG_INFINITY, &scenario)
            .expect("first departure executes");
        let horizon = vec![(1, 2), (2, 1), (2, 2)];
        let decision = solve_regulation(&state, &scenario, &horizon, &RegulationOptions::default());
        let Some(reference) = regulation_exhaustive(&state, &scenario, &horizon, 50_000_000) else {
            continue;
        };
        if reference.best_j > 1e-12 {
            worst_ratio = worst_ratio.max(decision.objective_j / reference.best_j);
            nontrivial += 1;
        }
    }
    println!(
        "regulation audit over {} cases ({} with nonzero cost): worst J ratio vs integer lattice = {:.6}",
        args.regulation_cases, nontrivial, worst_ratio
    );

    let pass = worst_dh <= 0.5 && worst_df <= 1e-6 && worst_ratio <= 1.01;
    if pass {
        println!("oracle audit: PASS");
        ExitCode::from(EXIT_OK)
    } else {
        eprintln!("oracle audit: FAIL");
        ExitCode::from(EXIT_VALIDATION)
    }
}
