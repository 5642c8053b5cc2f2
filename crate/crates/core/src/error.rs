use thiserror::Error;

/// Errors raised across the library and the harness.
///
/// The variant is the error category; the CLI maps each category to its own
/// exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("run diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("token {token}: {source}")]
    Token {
        token: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short category name, stable for scripting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Diverged { .. } => "run",
            Error::Token { source, .. } => source.category(),
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for the category (never 0).
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "format" => 3,
            "run" => 4,
            "io" => 5,
            "parameter" => 6,
            "dimension" => 7,
            "numeric" => 8,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
