use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chaomob_cli::{
    replay, run_stage, CliError, ExperimentConfig, Overrides, Stage, Workspace, OUT_DIR_ENV, SCHEMA_VERSION,
    TOOL_VERSION,
};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Chaotic-dynamics mobility toolkit.
#[derive(Debug, Parser)]
#[command(name = "chaomob")]
struct Cli {
    /// Worker threads for agent, seed and sweep parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the system and write trajectory.csv.
    Integrate(StageArgs),
    /// Detect section crossings in trajectory.csv; write the ρ series.
    Section(StageArgs),
    /// Build the (partial) first-return map from the ρ series.
    Map(StageArgs),
    /// Extract periodic orbits and place the symbol partition.
    Orbits(StageArgs),
    /// Generate UAV or exhibition-scenario mobility traces.
    Traces(StageArgs),
    /// Compare chaotic UAV coverage with a random walk.
    Coverage(StageArgs),
    /// Estimate the largest Lyapunov exponent.
    Lle(StageArgs),
    /// Sweep a parameter and record section values.
    Bifurcation(StageArgs),
    /// integrate, section, map and orbits in one run.
    Pipeline(StageArgs),
    /// Re-run a recorded stage and check its outputs are byte-identical.
    Replay {
        manifest: PathBuf,
        /// Directory for the re-run outputs [default: <manifest dir>/replay].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Directory holding upstream artifacts [default: the output directory].
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of agents for `traces`.
    #[arg(long)]
    agents: Option<usize>,
    /// Integration steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
}

fn run_with(stage: Stage, a: StageArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    cfg.apply(&Overrides {
        seed: a.seed,
        agents: a.agents,
        steps: a.steps,
        dt: a.dt,
    });
    let out = a
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("chaomob_out"));
    let resolved = cfg.resolve()?;
    let ws = Workspace {
        input: a.input.unwrap_or_else(|| out.clone()),
        output: out,
    };
    let manifest = run_stage(stage, &resolved, &ws)?;
    report(&ws.output, &manifest.outputs);
    Ok(())
}

fn report(dir: &Path, outputs: &std::collections::BTreeMap<String, String>) {
    for name in outputs.keys() {
        println!("{}", dir.join(name).display());
    }
}

fn main() -> ExitCode {
    let version = format!("{TOOL_VERSION} (config schema {SCHEMA_VERSION})");
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Integrate(a) => run_with(Stage::Integrate, a),
        Command::Section(a) => run_with(Stage::Section, a),
        Command::Map(a) => run_with(Stage::Map, a),
        Command::Orbits(a) => run_with(Stage::Orbits, a),
        Command::Traces(a) => run_with(Stage::Traces, a),
        Command::Coverage(a) => run_with(Stage::Coverage, a),
        Command::Lle(a) => run_with(Stage::Lle, a),
        Command::Bifurcation(a) => run_with(Stage::Bifurcation, a),
        Command::Pipeline(a) => run_with(Stage::Pipeline, a),
        Command::Replay { manifest, out } => {
            let out =
                out.unwrap_or_else(|| manifest.parent().unwrap_or_else(|| Path::new(".")).join("replay"));
            replay(&manifest, &out).map(|m| {
                report(&out, &m.outputs);
                println!(
                    "replay of `{}`: all {} outputs identical",
                    m.stage,
                    m.outputs.len()
                );
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
