use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mgre_cli::{CliError, Run, RunConfig, Stage};

/// Phantom → simulate → corrupt → fit / train / infer → evaluate.
#[derive(Parser, Debug)]
#[command(name = "mgre", version)]
struct Args {
    /// TOML run configuration (a previous run's manifest.toml replays it).
    #[arg(long)]
    config: PathBuf,
    /// phantom, simulate, corrupt, fit, train, infer, evaluate or all.
    #[arg(long)]
    stage: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn run(args: Args) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let stage = match args.stage.as_deref() {
        Some(s) => Stage::parse(s).ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))?,
        None => cfg.stage,
    };
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    Run::new(&cfg, args.quiet)?.run(stage)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mgre: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
