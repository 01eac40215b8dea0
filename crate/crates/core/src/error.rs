use thiserror::Error;

/// Errors raised by the numerical routines and the experiment runner.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// `c_pt (1 + lambda_pt) = 0` and `gamma_ft = 0` give `k = 0`.
    #[error("degenerate penalty: k = 0 (c_pt*(1+lambda_pt) = 0 and gamma_ft = 0)")]
    DegeneratePenalty,

    /// The scalar proximal solver ran out of iterations.
    #[error("prox solver did not converge for y={y}, penalty={penalty}, theta={theta} (residual {residual:e})")]
    ProxNonConvergence {
        y: f64,
        penalty: String,
        theta: f64,
        residual: f64,
    },

    /// Gradient descent blew up.
    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    Divergence { epoch: u64, loss: f64 },

    /// Dimensions of two inputs do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The ridge fixed point left its stable branch.
    #[error("ridge fixed point is numerically unstable: t^-2 - R = {margin:e}")]
    UnstableBranch { margin: f64 },

    /// An invariant that should hold by construction was violated.
    #[error("internal error: {0}")]
    Internal(String),

    /// Invalid experiment configuration.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
