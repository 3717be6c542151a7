//! `fvdm`: decode toy vecset fields, run decoding benchmarks and drive the
//! staged flow-distillation pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;
mod decode_cmd;
mod distill_cmd;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::CliConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fvdm_core::Error),
    #[error(transparent)]
    Distill(#[from] fvdm_distill::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fvdm", version, about = "Hierarchical vecset decoding and few-step flow distillation")]
struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for query evaluation (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode one shape and extract its surface.
    Decode(decode_cmd::DecodeArgs),
    /// Run a benchmark suite and write one JSON line per run.
    Bench(decode_cmd::BenchArgs),
    /// Flow distillation stages.
    Distill(DistillCmd),
}

#[derive(Debug, Args)]
struct DistillCmd {
    #[command(subcommand)]
    stage: distill_cmd::Stage,
}

/// Directory for outputs whose path was not given: `$FVDM_OUT_DIR`, or the
/// working directory.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("FVDM_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    create_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let config = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Decode(a) => decode_cmd::decode(a, config),
        Command::Bench(a) => decode_cmd::bench(a, config),
        Command::Distill(d) => distill_cmd::run(d.stage, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version print to stdout and exit 0; real usage errors exit 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
