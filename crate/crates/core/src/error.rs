use thiserror::Error;

use crate::multishot::IterTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("local OLS undefined: k = {k} machines with p = {p} features need at least {} samples, got n = {n}", k * p)]
    LocalOlsUndefined { n: usize, p: usize, k: usize },

    #[error("singular Gram matrix{} (condition estimate {condition:.3e})", machine_suffix(*machine))]
    SingularGram { machine: Option<usize>, condition: f64 },

    #[error("non-positive trace a_{machine} = {value:e}; local Gram matrix is rank deficient")]
    NonPositiveTrace { machine: usize, value: f64 },

    #[error("fixed-point solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("eta-transform inversion bracket exceeded {limit:e} while seeking eta(x) = {target}")]
    BracketOverflow { target: f64, limit: f64 },

    #[error("iteration diverged at round {round} (|beta| = {norm:e})")]
    Diverged { round: usize, norm: f64, trace: Box<IterTrace> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn machine_suffix(machine: Option<usize>) -> String {
    match machine {
        Some(i) => format!(" on machine {i}"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::LocalOlsUndefined { .. } => 2,
            Error::SingularGram { .. }
            | Error::NonPositiveTrace { .. }
            | Error::NoConvergence { .. }
            | Error::BracketOverflow { .. }
            | Error::Diverged { .. } => 3,
            Error::Context { source, .. } => source.exit_code(),
        }
    }

    /// Wrap the error with a description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Attach a machine index to a singular-Gram error raised inside a per-block routine.
    pub(crate) fn on_machine(self, index: usize) -> Self {
        match self {
            Error::SingularGram { condition, .. } => Error::SingularGram {
                machine: Some(index),
                condition,
            },
            other => other,
        }
    }
}
