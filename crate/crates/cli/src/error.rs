use std::fmt;
use std::path::Path;

/// Command failure, split by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, unreadable inputs, incompatible checkpoint: exit 1.
    Validation(String),
    /// Failure after a run has started (non-finite loss, write errors): exit 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error on {}: {e}", path.display()))
    }

    /// Prefixes the key of a core configuration error with its config section.
    pub(crate) fn in_section(section: &str, e: segqa::Error) -> Self {
        match e {
            segqa::Error::Config { key, reason } => {
                CliError::Validation(format!("invalid configuration: `{section}.{key}`: {reason}"))
            }
            other => other.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

impl From<segqa::Error> for CliError {
    fn from(e: segqa::Error) -> Self {
        use segqa::Error as E;
        let msg = e.to_string();
        match e {
            E::Config { .. } | E::RejectedInput(_) | E::Load { .. } | E::Incompatible(_) => CliError::Validation(msg),
            E::NonFiniteLoss { .. } | E::Io { .. } | E::Json(_) | E::Shape(_) | E::OptimizerMismatch(_) => {
                CliError::Runtime(msg)
            }
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("serialization failed: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
