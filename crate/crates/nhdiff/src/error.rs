use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate coefficient {name} = {value:e} at {point:?}")]
    Degenerate { name: String, value: f64, point: [f64; 4] },

    #[error("coefficient {name} = {value:e} at {point:?} violates the requested signature")]
    SignatureMismatch { name: String, value: f64, point: [f64; 4] },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no analytic derivatives available for {0}")]
    MissingAnalytic(String),

    #[error("derivative cross-check failed for {name}: analytic {analytic:e} vs finite difference {finite_difference:e}")]
    DerivativeMismatch { name: String, analytic: f64, finite_difference: f64 },

    #[error("h4 has vanishing t-derivative at {0:?}; use the vacuum branch")]
    VacuumBranch([f64; 3]),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("stability bound violated: {0}")]
    Stability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("conservation violated: {0}")]
    Conservation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Io(_) => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
