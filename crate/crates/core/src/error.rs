use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("probability entries must be finite and non-negative (slot {index} = {value})")]
    InvalidProbability { index: usize, value: f64 },

    #[error("distribution mass {mass} differs from 1 by more than {tolerance}")]
    NotNormalized { mass: f64, tolerance: f64 },

    #[error("window [{n_min}, {n_max}] is too narrow: boundary mass {boundary} exceeds {threshold}")]
    InsufficientWindow {
        n_min: i64,
        n_max: i64,
        boundary: f64,
        threshold: f64,
    },

    #[error("window width {width} exceeds the hard cap of {cap} slots")]
    TailOverflow { width: usize, cap: usize },

    #[error("divergence undefined: p has mass {p} at n = {n} where q vanishes")]
    DivergenceUndefined { n: i64, p: f64 },

    #[error("Gini index requires a positive mean, got {mean}")]
    NonPositiveMean { mean: f64 },

    #[error("degenerate distribution: {what} = {value:e} is below 1e-300")]
    DegenerateDistribution { what: &'static str, value: f64 },

    #[error("operator requires support in n >= 0, found mass {p} at n = {n}")]
    NegativeSupport { n: i64, p: f64 },

    #[error("the debt threshold {threshold} was not crossed before t = {t_end}")]
    HorizonExceeded { threshold: f64, t_end: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
