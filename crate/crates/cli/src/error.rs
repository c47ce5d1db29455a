use std::fmt;
use std::path::Path;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Missing or malformed input files, bad arguments.
    Input(String),
    /// Non-finite values or diverged training.
    Numeric(String),
    /// Invalid or inconsistent configuration.
    Config(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Config(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Prefixes the message with `path`.
    pub fn at(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Input(m) => CliError::Input(format!("{p}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{p}: {m}")),
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<simreuse::Error> for CliError {
    fn from(e: simreuse::Error) -> Self {
        use simreuse::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFinite(_) | E::Training { .. } => CliError::Numeric(msg),
            E::Config(_) => CliError::Config(msg),
            E::Shape(_)
            | E::Argument(_)
            | E::UndefinedSimilarity(_)
            | E::Format { .. }
            | E::Io(_) => CliError::Input(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
