use std::ffi::OsString;
use std::fs::File;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, CONFIG_HELP};
use crate::error::HarnessError;
use crate::experiment::run_experiment;
use crate::summary::{read_results, summarize, write_summary};
use crate::theorems::verify_theorems;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coreqn", version, about = "Quasi-Newton Bayesian coresets: experiments and checks", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the method grid described by a JSON config.
    #[command(after_help = CONFIG_HELP)]
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, env = "COREQN_THREADS")]
        threads: Option<usize>,
    },
    /// Check zero-KL coreset existence and linear convergence with exact moments.
    VerifyTheorems {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Percentile summary of a results CSV.
    Summarize {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn exit_code_for(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Config { .. } | HarnessError::Read { .. } | HarnessError::ConfigParse { .. } => EXIT_USAGE,
        _ => EXIT_PARTIAL,
    }
}

fn run(config_path: PathBuf, seed: Option<u64>, output_dir: Option<PathBuf>, threads: Option<usize>) -> i32 {
    let mut config = match ExperimentConfig::load(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(d) = output_dir {
        config.output_dir = d;
    }
    if threads.is_some() {
        config.threads = threads;
    }
    match run_experiment(&config) {
        Ok(outcome) => {
            println!("wrote {} rows to {}", outcome.results.len(), outcome.results_path.display());
            println!("summary in {}", outcome.summary_path.display());
            if outcome.failures > 0 {
                eprintln!("{} of {} cells failed", outcome.failures, outcome.results.len());
                EXIT_PARTIAL
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn summarize_cmd(input: PathBuf, output: Option<PathBuf>) -> i32 {
    let result = (|| -> crate::Result<()> {
        let file = File::open(&input).map_err(|source| HarnessError::Read { path: input.clone(), source })?;
        let rows = summarize(&read_results(file)?);
        match output {
            Some(p) => write_summary(&rows, File::create(p)?),
            None => write_summary(&rows, std::io::stdout().lock()),
        }
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on partial failure, 2 on usage or config errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match cli.command {
        Command::Run { config, seed, output_dir, threads } => run(config, seed, output_dir, threads),
        Command::VerifyTheorems { seed } => match verify_theorems(seed) {
            Ok(report) => {
                print!("{}", report.render());
                if report.ok() {
                    EXIT_OK
                } else {
                    EXIT_PARTIAL
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_PARTIAL
            }
        },
        Command::Summarize { input, output } => summarize_cmd(input, output),
    }
}
