use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brinkhom::harness::{emit_report, run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport};
use brinkhom::Error;
use clap::{Args, Parser, Subcommand};

const USAGE: u8 = 2;
const CONFIG: u8 = 3;
const SOLVER: u8 = 4;
const IO: u8 = 1;

#[derive(Parser)]
#[command(name = "brinkhom", version, about = "Homogenization experiments for flow through perforated domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capacity study of the cell problem
    Capacity(RunArgs),
    /// Steady perforated flow against the Brinkman limit
    Steady(RunArgs),
    /// Non-homogeneous evolution against the Brinkman limit
    Evolve(RunArgs),
    /// Run the homogenization experiment named by the config's `kind`
    Homogenize(RunArgs),
    /// Regenerate CSV and plots from a saved report directory
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory (default: the config's `out`, else ./out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Only print errors
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set mu=2 or --set forcing.amplitude=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding report.json
    dir: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) => CONFIG,
        Error::Io(_) => IO,
        e if e.is_solver_failure() => SOLVER,
        _ => CONFIG,
    }
}

fn setup(common: &Common) -> Result<(), u8> {
    let level = if common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    if let Some(n) = common.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return Err(USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return Err(USAGE);
        }
    }
    Ok(())
}

fn emit(report: &ExperimentReport, dir: &Path, quiet: bool) -> Result<(), u8> {
    match emit_report(report, dir) {
        Ok(files) => {
            if !quiet {
                for f in files {
                    println!("{}", f.display());
                }
            }
            Ok(())
        }
        Err(e) => {
            eprintln!("error: writing the report: {e}");
            Err(exit_code(&e))
        }
    }
}

fn run(kind: Option<ExperimentKind>, args: RunArgs) -> Result<(), u8> {
    setup(&args.common)?;
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        eprintln!("error: cannot read config {}: {e}", args.config.display());
        USAGE
    })?;
    let fail = |e: Error| {
        eprintln!("error: {e}");
        exit_code(&e)
    };
    let mut cfg = ExperimentConfig::load(&text, &args.overrides).map_err(fail)?;
    match kind {
        Some(k) => cfg.kind = k,
        None if cfg.kind == ExperimentKind::CapacityStudy => {
            eprintln!("error: homogenize needs kind = stationary-homogenization or evolution-homogenization");
            return Err(CONFIG);
        }
        None => {}
    }
    let out = args.common.out.clone().or_else(|| cfg.out.as_ref().map(PathBuf::from)).unwrap_or_else(|| "out".into());
    cfg.out = Some(out.to_string_lossy().into_owned());
    cfg.validate().map_err(fail)?;

    std::fs::create_dir_all(&out)
        .and_then(|_| std::fs::write(out.join("config.resolved.toml"), cfg.to_toml()))
        .map_err(|e| {
            eprintln!("error: cannot write to {}: {e}", out.display());
            IO
        })?;
    log::info!("{} (config {})", cfg.kind.name(), &cfg.hash()[..12]);

    let report = run_experiment(&cfg).map_err(fail)?;
    emit(&report, &out, args.common.quiet)?;
    if let Some(why) = &report.partial {
        eprintln!("error: partial report: {why}");
        return Err(SOLVER);
    }
    Ok(())
}

fn regenerate(args: ReportArgs) -> Result<(), u8> {
    setup(&args.common)?;
    let report = ExperimentReport::read(&args.dir.join("report.json")).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            Error::Io(_) => USAGE,
            e => exit_code(&e),
        }
    })?;
    let out = args.common.out.unwrap_or(args.dir);
    emit(&report, &out, args.common.quiet)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Capacity(a) => run(Some(ExperimentKind::CapacityStudy), a),
        Command::Steady(a) => run(Some(ExperimentKind::StationaryHomogenization), a),
        Command::Evolve(a) => run(Some(ExperimentKind::EvolutionHomogenization), a),
        Command::Homogenize(a) => run(None, a),
        Command::Report(a) => regenerate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
