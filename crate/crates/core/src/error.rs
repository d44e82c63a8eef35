use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    /// The sensor-side Kalman recursion never settled.
    #[error("steady-state filter did not converge after {iterations} iterations (last step {residual:e})")]
    Instability { iterations: usize, residual: f64 },

    /// `Tr(f^n(P))` left the representable range after `safe_depth`.
    #[error("cost ladder overflows past depth {safe_depth}")]
    Depth { safe_depth: usize },

    #[error("relative value iteration did not converge after {iterations} iterations (span {span:e})")]
    Convergence { iterations: usize, span: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
