use std::path::PathBuf;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Malformed or invalid configuration; `pointer` is a JSON pointer into
    /// the resolved config document.
    Config {
        pointer: String,
        message: String,
    },
    /// A checkpoint or dataset the command depends on is missing or stale.
    Prerequisite {
        path: PathBuf,
        message: String,
    },
    /// Non-finite values or divergence.
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Prerequisite { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn missing(path: impl Into<PathBuf>, producer: &str) -> Self {
        let path = path.into();
        CliError::Prerequisite {
            message: format!("expected {} (produced by `dsrt {producer}`)", path.display()),
            path,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config { pointer, message } => {
                let at = if pointer.is_empty() { "<root>" } else { pointer };
                write!(f, "config error at {at}: {message}")
            }
            CliError::Prerequisite { message, .. } => write!(f, "missing prerequisite: {message}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dsrt::Error> for CliError {
    fn from(e: dsrt::Error) -> Self {
        use dsrt::Error as E;
        match e {
            E::NonFinite { .. } | E::NonFiniteProbe { .. } | E::SamplingDiverged { .. } | E::Diverged { .. } | E::Degenerate(_) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
