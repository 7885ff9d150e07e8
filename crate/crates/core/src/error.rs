use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: mode {index}: {reason}")]
    InvalidMode { index: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("proximal solver did not converge (residual {residual:.3e})")]
    ProxNonConvergence { residual: f64 },

    #[error("point outside the domain of the drift (extrapolation residual {residual:.3e})")]
    Domain { residual: f64 },

    #[error("time {t} is not on the trajectory grid")]
    OffGrid { t: f64 },

    #[error("too many invalid paths: {invalid} of {total}")]
    EnsembleInvalid { invalid: usize, total: usize },

    #[error("nested estimation infeasible: {required} path simulations exceed the cap of {cap}")]
    Infeasible { required: u64, cap: u64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("fixed-point iteration did not converge after {iterations} sweeps (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("config error: {0}")]
    Config(String),
}
