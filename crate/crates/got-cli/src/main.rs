//! `got <command> --config <file> [--out <dir>] [--seed <n>]`
//!
//! Exit codes: 0 on success, 2 on a configuration problem, 3 when a
//! well-formed experiment fails to run. GOT_THREADS caps parallelism.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use got_cli::commands;
use got_cli::config::{self, config_err, exit_code, CliResult};

#[derive(Parser)]
#[command(
    name = "got",
    version,
    about = "Optimal-transport experiments on metric graphs and their tube thickenings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for sampling commands.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Tube-versus-graph transport convergence table and cost sandwich.
    Converge(RunArgs),
    /// Assignment figure over a rasterized network.
    Figure1(RunArgs),
    /// Transport stability under edge deletions.
    Stability(RunArgs),
    /// Cyclical-monotonicity audits of solved instances.
    Monotonicity(RunArgs),
    /// One dynamic-transport solve with field export.
    Dynamic(RunArgs),
    /// Minimizing-movement flow with energy log.
    Jko(RunArgs),
}

fn init_threads() -> CliResult<()> {
    if let Ok(raw) = std::env::var("GOT_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| config_err(format!("GOT_THREADS must be a positive integer, got '{}'", raw)))?;
        if n == 0 {
            return Err(config_err("GOT_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_err(format!("cannot size the thread pool: {}", e)))?;
    }
    Ok(())
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Converge(args) => {
            let mut cfg: config::ConvergeConfig = config::load_config(&args.config, "converge")?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let out = config::out_dir(&cfg.out, &args.out);
            commands::converge::execute(&cfg, &base_dir(&args.config), &out)?;
        }
        Command::Figure1(args) => {
            let mut cfg: config::Figure1Config = config::load_config(&args.config, "figure1")?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let out = config::out_dir(&cfg.out, &args.out);
            commands::figure1::execute(&cfg, &base_dir(&args.config), &out)?;
        }
        Command::Stability(args) => {
            let mut cfg: config::StabilityConfig = config::load_config(&args.config, "stability")?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let out = config::out_dir(&cfg.out, &args.out);
            commands::stability::execute(&cfg, &base_dir(&args.config), &out)?;
        }
        Command::Monotonicity(args) => {
            let mut cfg: config::MonotonicityConfig =
                config::load_config(&args.config, "monotonicity")?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let out = config::out_dir(&cfg.out, &args.out);
            commands::monotonicity::execute(&cfg, &base_dir(&args.config), &out)?;
        }
        Command::Dynamic(args) => {
            let cfg: config::DynamicConfig = config::load_config(&args.config, "dynamic")?;
            if args.seed.is_some() {
                eprintln!("note: --seed has no effect on the dynamic command (no sampling)");
            }
            let out = config::out_dir(&cfg.out, &args.out);
            commands::dynamic::execute(&cfg, &base_dir(&args.config), &out)?;
        }
        Command::Jko(args) => {
            let cfg: config::JkoConfig = config::load_config(&args.config, "jko")?;
            if args.seed.is_some() {
                eprintln!("note: --seed has no effect on the jko command (no sampling)");
            }
            let out = config::out_dir(&cfg.out, &args.out);
            commands::jko::execute(&cfg, &base_dir(&args.config), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = init_threads().and_then(|()| dispatch(&cli.command));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
