use chrono::NaiveDateTime;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or model parameter is out of its valid range.
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: String, reason: String },

    #[error("state of charge {0} outside [0, 1]")]
    SocDomain(f64),

    #[error("power {power_w} W exceeds converter rating {rated_w} W")]
    PowerRange { power_w: f64, rated_w: f64 },

    #[error("price data format error at line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error("price data has a gap starting at {missing}")]
    Gap { missing: NaiveDateTime },

    #[error("price data does not cover {0}")]
    Coverage(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("state of charge bound violated at step {step}: soc = {soc}")]
    SocBound { step: usize, soc: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
