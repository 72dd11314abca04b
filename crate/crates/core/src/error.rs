use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    /// A point fell outside the open domain of a potential.
    #[error("domain error: {what} (norm {norm:.6e}, limit {limit:.6e})")]
    Domain {
        what: String,
        norm: f64,
        limit: f64,
    },

    #[error("gradient inversion did not converge after {iterations} iterations (residual {residual:.3e})")]
    Inversion { iterations: usize, residual: f64 },

    #[error("finite-difference stencil hit a non-finite value at coordinate {coordinate}")]
    Stencil { coordinate: usize },

    #[error("no feasible point: every evaluated value is infinite")]
    EmptyFeasible,

    #[error("envelope appears unbounded below: grid minima {minima:?} keep decreasing")]
    UnboundedBelow { minima: Vec<f64> },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("line search failed after {halvings} halvings{context}")]
    LineSearch { halvings: usize, context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Attach iterate context to a line-search failure.
    pub fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::LineSearch { halvings, context } => Error::LineSearch {
                halvings,
                context: format!("{context} at iteration {iter}"),
            },
            other => other,
        }
    }

    /// True for failures of the numerical kind (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::Argument(_) | Error::Config(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
