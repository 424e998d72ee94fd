//! Command-line front end for the residual-quantization toolkit: TOML run
//! configuration with presets ([`config`]), bit-exact codebook archives
//! ([`archive`]), feature and token-grid text formats ([`ingest`]), and the
//! `resq` subcommands ([`dispatch`]).
//!
//! Exit codes are part of the interface: 0 success, 1 usage error,
//! 2 invalid configuration or input, 3 numeric divergence. Every failure
//! prints exactly one machine-readable line to stderr of the form
//! `error: <usage|validation|divergence>: <detail>`.

use std::path::Path;

pub mod archive;
pub mod config;
pub mod dispatch;
pub mod ingest;

pub use archive::{load_codebooks, save_codebooks, LoadedArchive};
pub use config::{load_config, parse_config, RunConfig};
pub use dispatch::{dispatch, quantize_features, usage_metrics, MetricsOutput};

/// Errors the front end reports, keyed by their exit code: usage problems
/// exit 1, invalid configuration or input exits 2, numeric divergence
/// exits 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    /// Error text flattened onto a single line for the stderr contract.
    /// Multi-line sources (TOML parse errors with caret pointers) are
    /// joined with "; ".
    pub fn one_line(&self) -> String {
        self.to_string()
            .lines()
            .map(str::trim)
            .filter(|line| !line.is_empty())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl From<resq_core::Error> for CliError {
    fn from(err: resq_core::Error) -> Self {
        match err {
            resq_core::Error::BoundViolation { .. } => CliError::Divergence(err.to_string()),
            _ => CliError::Validation(err.to_string()),
        }
    }
}

impl From<resq_harness::HarnessError> for CliError {
    fn from(err: resq_harness::HarnessError) -> Self {
        match err {
            resq_harness::HarnessError::Diverged { .. } => CliError::Divergence(err.to_string()),
            resq_harness::HarnessError::Core(core) => core.into(),
            resq_harness::HarnessError::InvalidConfig { .. } => {
                CliError::Validation(err.to_string())
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Wraps an I/O failure as a validation error naming the action and path.
pub(crate) fn io_error<'a>(
    action: &'a str,
    path: &'a Path,
) -> impl FnOnce(std::io::Error) -> CliError + 'a {
    move |err| CliError::Validation(format!("{action} {}: {err}", path.display()))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partially written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let Some(name) = path.file_name() else {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "target path has no file name",
        ));
    };
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
