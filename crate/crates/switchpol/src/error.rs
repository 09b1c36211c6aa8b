use std::fmt;

/// Errors surfaced by the switchpol library.
#[derive(Debug, Clone)]
pub enum Error {
    /// Invalid argument (empty input, NaN, dimension mismatch, bad range).
    InvalidArgument(String),
    /// A matrix that must be positive definite is not.
    NotPositiveDefinite { what: String },
    /// Forward integration produced a state outside the model's domain.
    Integration(String),
    /// The steering-angle equation has no root in the admissible interval.
    InversionInfeasible { step: usize, detail: String },
    /// An iterative solver failed to converge.
    Solver(String),
    /// Track geometry query failed (projection ambiguous, lookahead past end).
    Geometry(String),
    /// Problem instance exceeds a hard capacity limit.
    Capacity(String),
    /// History-vector layout violates a required contract.
    Layout(String),
    /// No strictly feasible start exists for the stability-constrained step.
    StabilityInfeasible(String),
    /// Closed-loop generation left the valid region.
    Generation(String),
    /// All fitting starts failed.
    Fit(String),
    /// Malformed input file.
    Parse { path: String, detail: String },
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NotPositiveDefinite { what } => {
                write!(f, "matrix not positive definite: {what}")
            }
            Error::Integration(msg) => write!(f, "integration error: {msg}"),
            Error::InversionInfeasible { step, detail } => {
                write!(f, "input inversion infeasible at step {step}: {detail}")
            }
            Error::Solver(msg) => write!(f, "solver error: {msg}"),
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::Capacity(msg) => write!(f, "capacity exceeded: {msg}"),
            Error::Layout(msg) => write!(f, "layout error: {msg}"),
            Error::StabilityInfeasible(msg) => write!(f, "stability infeasible: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::Fit(msg) => write!(f, "fit error: {msg}"),
            Error::Parse { path, detail } => write!(f, "parse error in {path}: {detail}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
