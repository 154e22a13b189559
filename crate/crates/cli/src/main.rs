//! `tokenflip`: run the token-flipping probes and GRPO training loops from
//! the command line. Every invocation writes one self-describing run
//! directory.

mod commands;
mod config;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{resolve, Resolved, Sources};
use crate::error::{CliError, CliResult};
use crate::rundir::RunDir;

#[derive(Debug, Parser)]
#[command(name = "tokenflip", version, about = "Token-level probes of GRPO updates on a small policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Supervised warm start; writes the checkpoint other runs can load.
    WarmStart(RunArgs),
    /// GRPO training with a chosen mini-batch plan.
    Train(RunArgs),
    /// One update, then boosted/suppressed/stable counts per polarity.
    ProbeFlip(RunArgs),
    /// Coupling kernel statistics and masked-update experiments.
    ProbeCoupling(RunArgs),
    /// Within-group gradient cancellation and polarity comparison.
    ProbeCancel(RunArgs),
    /// Monte-Carlo token values (modes: gap, calibration, budget, repeat).
    ProbeValue(RunArgs),
    /// Training runs across batching variants and seeds.
    AblateBatching(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::WarmStart(_) => "warm-start",
            Command::Train(_) => "train",
            Command::ProbeFlip(_) => "probe-flip",
            Command::ProbeCoupling(_) => "probe-coupling",
            Command::ProbeCancel(_) => "probe-cancel",
            Command::ProbeValue(_) => "probe-value",
            Command::AblateBatching(_) => "ablate-batching",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::WarmStart(a)
            | Command::Train(a)
            | Command::ProbeFlip(a)
            | Command::ProbeCoupling(a)
            | Command::ProbeCancel(a)
            | Command::ProbeValue(a)
            | Command::AblateBatching(a) => a,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to a fresh directory under $TOKENFLIP_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Config overrides such as `train.steps=50` or `value.mode=calibration`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn out_dir(args: &RunArgs, command: &str, run: &Resolved) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let root = std::env::var_os("TOKENFLIP_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let hash = rundir::sha256_hex(run.toml.as_bytes());
    root.join(format!("{command}-seed{}-{}", run.seed, &hash[..12]))
}

fn execute(command: &Command) -> CliResult<PathBuf> {
    let args = command.args();
    let run = resolve(&Sources {
        file: args.config.as_deref(),
        overrides: &args.overrides,
        seed: args.seed,
        workers: args.workers,
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(run.config.workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    let path = out_dir(args, command.name(), &run);
    let mut dir = RunDir::create(&path, command.name(), run.seed, &run.toml)?;
    match command {
        Command::WarmStart(_) => commands::warm_start_cmd(&run, &mut dir),
        Command::Train(_) => commands::train_cmd(&run, &mut dir),
        Command::ProbeFlip(_) => commands::probe_flip(&run, &mut dir),
        Command::ProbeCoupling(_) => commands::probe_coupling(&run, &mut dir),
        Command::ProbeCancel(_) => commands::probe_cancel(&run, &mut dir),
        Command::ProbeValue(_) => commands::probe_value(&run, &mut dir),
        Command::AblateBatching(_) => commands::ablate_batching(&run, &mut dir),
    }?;
    let root = dir.root().to_path_buf();
    dir.finish()?;
    Ok(root)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(root) => {
            println!("{}", root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tokenflip {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
