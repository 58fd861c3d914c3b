//! Command-line experiment runner for `gelfand-smp`.
//!
//! Each subcommand reads one TOML configuration, runs the corresponding
//! library routines and writes CSV data, JSON reports and a manifest into
//! the output directory. Exit codes: 0 when every check passes, 1 when a
//! check, assumption or solver fails, 2 for usage and configuration errors.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::commands::Run;
use crate::config::ExperimentConfig;
use crate::manifest::{sha256_hex, Artifacts, Manifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gelfand_smp::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Core(_) | Self::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gelfand-smp", version, about = "Controlled jump-diffusion SPDE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed; overrides every seed in the config.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, value_name = "INT", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the state equation and write paths plus the a priori estimate.
    Simulate,
    /// Run the structural and numerical audits.
    Audit,
    /// Optimise a control and verify the result.
    Optimize,
    /// Run the end-to-end linear-quadratic demonstration.
    Example8,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Audit => "audit",
            Self::Optimize => "optimize",
            Self::Example8 => "example8",
        }
    }
}

/// Runs one subcommand and returns whether every check passed.
pub fn execute(cli: &Cli) -> Result<bool, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let (mut config, raw) = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let problem = config.effective_problem();
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut effective = config.clone();
    effective.problem = problem.clone();
    effective.seed = None;
    effective.paths = None;
    effective.steps = None;
    effective.output = None;
    let effective_json = serde_json::to_vec(&effective).map_err(|e| CliError::Io(e.to_string()))?;

    let run = || -> Result<(bool, Artifacts), CliError> {
        let mut artifacts = Artifacts::create(&out_dir)?;
        let ctx = Run {
            config: &config,
            problem: problem.clone(),
        };
        let passed = match cli.command {
            Command::Simulate => commands::simulate(&ctx, &mut artifacts)?,
            Command::Audit => commands::audit(&ctx, &mut artifacts)?,
            Command::Optimize => commands::optimize(&ctx, &mut artifacts)?,
            Command::Example8 => commands::example8(&ctx, &mut artifacts)?,
        };
        Ok((passed, artifacts))
    };
    let (passed, artifacts) = match cli.threads {
        None => run()?,
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(t))
            .build()
            .map_err(|e| CliError::Io(format!("cannot start thread pool: {e}")))?
            .install(run)?,
    };
    artifacts.finish(Manifest {
        tool: "gelfand-smp",
        version: gelfand_smp::VERSION,
        subcommand: cli.command.name().to_string(),
        schema_version: config.schema_version,
        config_sha256: sha256_hex(&raw),
        effective_config_sha256: sha256_hex(&effective_json),
        seed: problem.seed,
        passed,
        artifacts: Default::default(),
    })?;
    Ok(passed)
}

/// Parses the command line, runs it and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: one or more checks failed", cli.command.name());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
