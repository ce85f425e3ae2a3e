//! `crdnd`: train, evaluate and ablate contrastive relationship denoise distillation.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on an invalid configuration, bad
//! flags or a missing input checkpoint.

mod args;
mod commands;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use crdnd::config::RunConfig;

use args::{Cli, Command, RunArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(crdnd::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(crdnd::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(crdnd::Error::Config { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<crdnd::Error> for CliError {
    fn from(e: crdnd::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

fn resolve(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path, run.profile)?,
        None => RunConfig::resolve(None, run.profile)?,
    };
    run.apply(&mut cfg);
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { run, ablation } => {
            let mut cfg = resolve(&run)?;
            if let Some(a) = ablation {
                cfg.train.ablation = a;
            }
            commands::prepare(&cfg, "train")?;
            commands::train(&cfg, ablation)
        }
        Command::Eval {
            run,
            checkpoint,
            report,
        } => {
            let cfg = resolve(&run)?;
            commands::prepare(&cfg, "eval")?;
            commands::eval(&cfg, &checkpoint, report)
        }
        Command::Ablate { run } => {
            let cfg = resolve(&run)?;
            commands::prepare(&cfg, "ablate")?;
            commands::ablate(&cfg)
        }
        Command::MakeTeacher { run } => {
            let cfg = resolve(&run)?;
            commands::prepare(&cfg, "make-teacher")?;
            commands::make_teacher(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
