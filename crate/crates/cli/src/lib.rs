//! `m2rnn` command-line tool: gradient checks, training, length evaluation,
//! tensor-parallel checks, parameter counts and a recurrence benchmark.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "m2rnn", version, about = "Matrix-state RNN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `KEY=VALUE`, applied after the config file; repeatable
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Compare every analytic backward against finite differences and the tape
    Gradcheck,
    /// Train one model and write a checkpoint and metrics.csv
    Train,
    /// Final-position accuracy of a checkpoint at each of `eval_lengths`
    EvalLengths,
    /// Sharded layer step against a single-device reference
    TpCheck,
    /// Projection parameter counts and state sizes of the four head patterns
    Paramcount,
    /// Fused vs unfused recurrence throughput
    Bench,
}

/// What a command printed and whether its verification passed.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub report: String,
    pub passed: bool,
}

impl Cli {
    /// Config file, then `--override`s, then `--seed` and `--out`.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", toml::Value::String(out.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_report(cfg: &RunConfig, name: &str, report: &str) -> Result<()> {
    let path = cfg.out.join(name);
    std::fs::write(&path, report).map_err(|e| CliError::io(path, e))
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    match command {
        Command::Gradcheck => commands::gradcheck::run(cfg),
        Command::Train => commands::train::run(cfg),
        Command::EvalLengths => commands::train::eval_lengths(cfg),
        Command::TpCheck => commands::tp_check::run(cfg),
        Command::Paramcount => commands::paramcount::run(cfg),
        Command::Bench => commands::bench::run(cfg),
    }
}

/// Parses `args` (program name first), runs the command, prints its report,
/// and returns the process exit status: 0 success, 1 verification failure,
/// 2 config or I/O error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.run_config().and_then(|cfg| execute(cli.command, &cfg)) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            if outcome.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
