use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("time {t} outside the path support [{t_min}, {t_max}]")]
    OutOfRange { t: f64, t_min: f64, t_max: f64 },

    #[error("tail of the stationary integral is e^{t_min} = {tail:.3e} > {tol:.3e}; need t_min <= {required_t_min:.3}")]
    Truncation {
        t_min: f64,
        tail: f64,
        tol: f64,
        required_t_min: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solution blew up at t = {t}: norm {norm:.3e} exceeds {limit:.3e}")]
    BlowUp { t: f64, norm: f64, limit: f64 },

    #[error("fixed-point iteration did not contract after {iterations} iterations (residual {residual:.3e}, gap value {gap_value:.3})")]
    NoContraction {
        iterations: usize,
        residual: f64,
        gap_value: f64,
    },

    #[error("gap condition violated: value {value:.6} >= 1")]
    GapViolated { value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BlowUp { .. } | Error::NoContraction { .. } => 2,
            _ => 1,
        }
    }
}
