use thiserror::Error;

/// Failures surfaced to the shell. Each variant maps to one exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: tokenflip_core::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime { .. } | CliError::Io(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a subcommand context to core errors.
pub trait Context<T> {
    fn context(self, what: &str) -> CliResult<T>;
}

impl<T> Context<T> for tokenflip_core::Result<T> {
    fn context(self, what: &str) -> CliResult<T> {
        self.map_err(|source| CliError::Runtime {
            context: what.to_string(),
            source,
        })
    }
}

/// Wraps a core validation failure as a config error.
pub fn invalid(e: tokenflip_core::Error) -> CliError {
    CliError::Config(e.to_string())
}
