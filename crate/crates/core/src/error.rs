use thiserror::Error;

/// Errors reported by the library.
///
/// The CLI maps [`Error::Infeasible`] and [`Error::PrecisionExhausted`] to
/// exit code 3 and everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid law: {0}")]
    InvalidLaw(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("precision exhausted: {0}")]
    PrecisionExhausted(String),

    #[error("degenerate fit: only {usable} usable points (need at least 3)")]
    DegenerateFit { usable: usize },

    #[error("exact enumeration needs {states:.3e} states (limit 1e7); use Monte Carlo mode")]
    StateSpaceTooLarge { states: f64 },

    #[error("numerically degenerate nullspace on support points {points:?}")]
    DegenerateNullspace { points: Vec<f64> },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that report a mathematical obstruction rather than bad input.
    pub fn is_infeasibility(&self) -> bool {
        matches!(self, Error::Infeasible(_) | Error::PrecisionExhausted(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
