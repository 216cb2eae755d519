//! The `redbert` command line: corpus generation, pretraining, fine-tuning,
//! evaluation, and embedding projection. Every run writes its manifest
//! first, then metrics and any checkpoint into one run directory.

mod commands;
mod settings;

use std::ffi::OsString;
use std::fmt;

use clap::Command;

pub use settings::{parse_config, Settings};

/// Exit status for usage and configuration problems.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for data and run failures.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(redbert_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<redbert_core::Error> for CliError {
    fn from(e: redbert_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<redbert_core::tensor::TensorError> for CliError {
    fn from(e: redbert_core::tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(redbert_core::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

pub fn cli() -> Command {
    Command::new("redbert")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Retail-domain BERT retraining at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(settings::subcommand(
            "gen-corpus",
            "Generate the synthetic retail corpus, vocabulary, dependency vectors, and task datasets",
        ))
        .subcommand(settings::subcommand("pretrain", "Joint MLM + NSP pretraining"))
        .subcommand(settings::subcommand("finetune", "Fine-tune a downstream task head"))
        .subcommand(settings::subcommand("eval", "Score a fine-tuned checkpoint on labeled data"))
        .subcommand(settings::subcommand(
            "project",
            "PCA projection and token distances for one sentence under two models",
        ))
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return EXIT_USAGE;
    };
    let outcome = Settings::resolve(name, sub).and_then(|s| commands::dispatch(&s));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("redbert {name}: {e}");
            e.exit_code()
        }
    }
}
