use thiserror::Error;

/// Errors raised by the planning, simulation and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("channel index {0} is outside the supported grid range [-100, 100]")]
    GridRange(i64),

    #[error("signal channel {0} coincides with the pump; no degenerate pairs")]
    DegeneratePair(String),

    #[error("insufficient channels: need {required} conjugate pairs, only {available} usable (short by {})", required - available)]
    Capacity { required: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("{name} = {value} is outside [{min}, {max}]")]
    Range {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("fit failed after {iterations} iterations: {reason} (residual {residual:.4e})")]
    FitFailure {
        reason: String,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("inconsistent rates: {0}")]
    Inconsistent(String),

    #[error("QBER undefined for empty keys")]
    UndefinedQber,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_range(name: &'static str, value: f64, min: f64, max: f64) -> Result<f64> {
    if value.is_nan() || value < min || value > max {
        Err(Error::Range {
            name,
            value,
            min,
            max,
        })
    } else {
        Ok(value)
    }
}
