use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Everything the harness can fail with. [`HarnessError::category`] gives the short
/// machine-readable tag the CLI prints.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// A file parsed but a field is missing or malformed.
    #[error("{path}: field `{field}`: {message}")]
    Field { path: PathBuf, field: String, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    /// A checkpoint does not fit the configuration or model it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Training diverged; the offending batch was written to `dump`.
    #[error("non-finite loss at epoch {epoch}, step {step} (batch {batch:?}); diagnostics in {dump}")]
    Diverged { epoch: usize, step: usize, batch: Vec<String>, dump: PathBuf },
    #[error(transparent)]
    Core(#[from] implant_depth_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Self::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn field(path: impl AsRef<Path>, field: &str, message: impl Into<String>) -> Self {
        Self::Field { path: path.as_ref().to_path_buf(), field: field.to_string(), message: message.into() }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Self::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }

    pub fn category(&self) -> &'static str {
        use implant_depth_core::Error as E;
        match self {
            Self::Io { .. } => "io",
            Self::Field { .. } | Self::Format { .. } => "format",
            Self::Version { .. } => "version",
            Self::Mismatch(_) => "mismatch",
            Self::Config(_) | Self::Core(E::Config(_)) => "config",
            Self::Diverged { .. } | Self::Core(E::NonFinite(_)) => "non-finite",
            Self::Core(E::Shape(_)) => "shape",
            Self::Core(E::OutOfRange(_)) => "out-of-range",
            Self::Core(E::Invalid(_)) => "invalid",
        }
    }

    /// Process exit code; distinct per category family.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "format" | "version" | "mismatch" => 4,
            "non-finite" => 5,
            _ => 1,
        }
    }
}

/// Attach a path to IO failures.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| HarnessError::io(path, e))
    }
}
