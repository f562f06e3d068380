use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iht_core::experiments::{self, ExperimentConfig, Mode};
use iht_core::Error;

/// Seeded Monte-Carlo experiments for iterative hard thresholding.
#[derive(Parser, Debug)]
#[command(name = "iht-experiments", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Low-rank matrix recovery from Gaussian or isometric designs.
    SimulateMatrix(RunArgs),
    /// Pauli-measurement state tomography.
    SimulateQuantum(RunArgs),
    /// Sparse regression with a decorrelating matrix.
    SimulateSparse(RunArgs),
    /// Recompute an aggregate CSV from a replicate CSV.
    Report {
        /// A `<mode>_replicates.csv` file.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the aggregate file; defaults to the input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config; keys follow the config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 2,
        Error::Numerical(_) | Error::AssumptionViolation(_) | Error::Unsupported(_) | Error::Infeasible { .. } => 3,
        Error::Io(_) | Error::Csv(_) | Error::Format(_) => 4,
    }
}

fn build_config(mode: Mode, args: &RunArgs) -> iht_core::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path, mode).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::new(mode),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(o) = &args.out {
        config.output_dir = o.clone();
    }
    if let Some(w) = args.workers {
        config.workers = Some(w);
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    config.validate()?;
    Ok(config)
}

fn aggregate_path(input: &Path, out: Option<&Path>) -> PathBuf {
    let name = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix("_replicates.csv")
        .or_else(|| name.strip_suffix(".csv"))
        .unwrap_or(&name);
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| input.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    dir.join(format!("{stem}_aggregate.csv"))
}

fn run(cli: Cli) -> iht_core::Result<()> {
    let (mode, args) = match cli.command {
        Command::SimulateMatrix(a) => (Mode::MatrixSim, a),
        Command::SimulateQuantum(a) => (Mode::Quantum, a),
        Command::SimulateSparse(a) => (Mode::Sparse, a),
        Command::Report { input, out } => {
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
            }
            let target = aggregate_path(&input, out.as_deref());
            experiments::report(&input, &target)?;
            println!("{}", target.display());
            return Ok(());
        }
    };
    let config = build_config(mode, &args)?;
    let files = experiments::run_and_write(&config)?;
    println!("{}", files.replicates.display());
    println!("{}", files.aggregate.display());
    println!("{}", files.timing.display());
    if let Some(c) = files.coordinates {
        println!("{}", c.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
