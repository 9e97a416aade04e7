use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbc_core::checks::{run_suite, SuiteSize};
use pbc_core::report::{
    atlas, comparison_table, summary_json, trace_plots, write_trace_csv, GridAxis,
};
use pbc_core::robot_model::RobotModel;
use pbc_core::sim::{run_scenario, ControllerKind, Scenario, SimOutput, Summary};
use pbc_core::task_space::{TaskMapConfig, TaskMode};

const EXIT_INPUT: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "pbc", version, about = "Passivity-constrained task-space control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, summary.json and optional plots.
    Simulate(SimulateArgs),
    /// Run scenarios under all four controllers and tabulate the results.
    Compare(CompareArgs),
    /// Sweep manipulability over a joint-space grid.
    Atlas(AtlasArgs),
    /// Run the randomized invariant suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write V.svg, Vdot.svg and mu.svg.
    #[arg(long)]
    plots: bool,
    /// Record wall-clock solve times (makes traces non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Override the controller named in the scenario.
    #[arg(long)]
    controller: Option<ControllerKind>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: Vec<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct AtlasArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "pose6")]
    task: TaskMode,
    /// One `min:max:count` per joint.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random states per state-sampling check.
    #[arg(long, default_value_t = 1000)]
    states: usize,
    /// Points per trajectory-sampling check.
    #[arg(long, default_value_t = 500)]
    points: usize,
    /// Random problems for the solver oracle.
    #[arg(long, default_value_t = 200)]
    qps: usize,
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_outputs(dir: &Path, out: &SimOutput, epsilon: f64, plots: bool) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    write_file(&dir.join("trace.csv"), &write_trace_csv(&out.rows))?;
    write_file(&dir.join("summary.json"), &summary_json(&out.summary))?;
    if plots {
        for (name, svg) in trace_plots(&out.rows, epsilon) {
            write_file(&dir.join(name), &svg)?;
        }
    }
    Ok(())
}

fn load_scenario(path: &Path, timing: bool) -> Result<Scenario, String> {
    let mut scenario = Scenario::from_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
    scenario.timing = timing;
    Ok(scenario)
}

/// Runs and writes one scenario; `Ok(false)` means the run aborted and only
/// partial output was written.
fn run_and_write(scenario: &Scenario, dir: &Path, plots: bool) -> Result<(Summary, bool), String> {
    let eps = scenario.barrier.epsilon;
    match run_scenario(scenario) {
        Ok(out) => {
            write_outputs(dir, &out, eps, plots)?;
            Ok((out.summary, true))
        }
        Err(err) => match err.partial() {
            Some(partial) => {
                eprintln!("{}: {err}", scenario.controller);
                write_outputs(dir, partial, eps, plots)?;
                Ok((partial.summary.clone(), false))
            }
            None => Err(err.to_string()),
        },
    }
}

fn simulate(args: SimulateArgs) -> ExitCode {
    let mut scenario = match load_scenario(&args.scenario, args.output.timing) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    if let Some(c) = args.controller {
        scenario.controller = c;
    }
    match run_and_write(&scenario, &args.output.out, args.output.plots) {
        Ok((summary, completed)) => {
            println!("{}", summary_json(&summary));
            if completed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ABORT)
            }
        }
        Err(e) => fail(EXIT_INPUT, e),
    }
}

fn compare(args: CompareArgs) -> ExitCode {
    if args.scenario.is_empty() {
        return fail(EXIT_INPUT, "no scenarios given (use --scenario PATH)");
    }
    let mut aborted = false;
    for path in &args.scenario {
        let base = match load_scenario(path, args.output.timing) {
            Ok(s) => s,
            Err(e) => return fail(EXIT_INPUT, e),
        };
        let stem = path.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
        let root = args.output.out.join(&stem);
        let results: Vec<Result<(Summary, bool), String>> = std::thread::scope(|scope| {
            let handles: Vec<_> = ControllerKind::COMPARED
                .iter()
                .map(|kind| {
                    let mut scenario = base.clone();
                    scenario.controller = *kind;
                    let dir = root.join(kind.as_str());
                    let plots = args.output.plots;
                    scope.spawn(move || run_and_write(&scenario, &dir, plots))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("controller thread")).collect()
        });
        let mut summaries = Vec::new();
        for r in results {
            match r {
                Ok((summary, completed)) => {
                    aborted |= !completed;
                    summaries.push(summary);
                }
                Err(e) => return fail(EXIT_INPUT, e),
            }
        }
        println!("{}", path.display());
        print!("{}", comparison_table(&summaries, base.barrier.epsilon));
        if let Err(e) = write_file(
            &root.join("comparison.json"),
            &serde_json::to_string_pretty(&summaries).expect("summaries serialize"),
        ) {
            return fail(EXIT_INPUT, e);
        }
    }
    if aborted {
        ExitCode::from(EXIT_ABORT)
    } else {
        ExitCode::SUCCESS
    }
}

fn run_atlas(args: AtlasArgs) -> ExitCode {
    let model = match RobotModel::from_file(&args.model) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let grid: Result<Vec<GridAxis>, String> = args.grid.iter().map(|g| g.parse()).collect();
    let grid = match grid {
        Ok(g) => g,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let result = match atlas(&model, &TaskMapConfig::new(args.task), &grid) {
        Ok(a) => a,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    if let Err(e) = std::fs::create_dir_all(&args.out)
        .map_err(|e| format!("cannot create {}: {e}", args.out.display()))
        .and_then(|_| write_file(&args.out.join("atlas.csv"), &result.csv))
    {
        return fail(EXIT_INPUT, e);
    }
    let argmin: Vec<String> = result.argmin.iter().map(|v| format!("{v:.6}")).collect();
    println!("points: {}", result.points);
    println!("min mu: {:.6e}", result.min_mu);
    println!("argmin q: [{}]", argmin.join(", "));
    ExitCode::SUCCESS
}

fn check(args: CheckArgs) -> ExitCode {
    let outcomes = run_suite(
        args.seed,
        SuiteSize {
            states: args.states,
            trajectory_points: args.points,
            qps: args.qps,
        },
    );
    for o in &outcomes {
        println!("{}", o.line());
    }
    if outcomes.iter().all(|o| o.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::Atlas(a) => run_atlas(a),
        Command::Check(a) => check(a),
    }
}
