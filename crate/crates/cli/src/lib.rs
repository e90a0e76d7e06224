//! Command-line front end: `fit`, `predict`, `mse`, `simulate` and `check`.
//!
//! Exit codes: 0 success, 1 failed check or internal error, 2 no
//! convergence, 3 input error, 4 singular information. Failures print one
//! JSON object to stderr.

use std::ffi::OsString;
use std::fmt;

use eblup::EblupError;
use serde::Serialize;

mod commands;
pub mod input;
pub mod report;

pub use commands::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_SINGULAR: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Model(EblupError),
    Io(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Model(EblupError::SingularInformation) => EXIT_SINGULAR,
            CliError::Model(
                EblupError::NotPositiveDefinite | EblupError::SingularGram | EblupError::StudyFailed { .. },
            ) => EXIT_FAILURE,
            CliError::Model(_) => EXIT_INPUT,
            CliError::Io(_) => EXIT_FAILURE,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Model(EblupError::SingularInformation) => "singular-information",
            CliError::Model(_) => "model",
            CliError::Io(_) => "io",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Io(m) => f.write_str(m),
            CliError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl From<EblupError> for CliError {
    fn from(e: EblupError) -> Self {
        CliError::Model(e)
    }
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

pub(crate) fn emit_error(kind: &str, message: String, exit_code: i32) -> i32 {
    let body = ErrorJson { error: kind, message, exit_code };
    eprintln!("{}", serde_json::to_string(&body).expect("error JSON"));
    exit_code
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            return emit_error("input", e.to_string().trim_end().to_string(), EXIT_INPUT);
        }
    };
    match commands::execute(cli) {
        Ok(code) => code,
        Err(e) => emit_error(e.kind(), e.to_string(), e.exit_code()),
    }
}
