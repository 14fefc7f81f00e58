use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("time {t} outside tabulated rate domain [{start}, {end}]")]
    OutsideRateDomain { t: f64, start: f64, end: f64 },

    #[error("state annihilated (norm^2 = {norm_sq:e})")]
    StateAnnihilated { norm_sq: f64 },

    #[error("channel cannot fire from this state")]
    ChannelCannotFire,

    #[error("time step too large: jump probability {probability} at t = {t}")]
    StepTooLarge { probability: f64, t: f64 },

    #[error("time step too large for negative channel: probability {probability} at t = {t}")]
    NegativeStepTooLarge { probability: f64, t: f64 },

    #[error("unraveling breakdown: negative channel '{channel}' at t = {t} has no populated source state")]
    UnravelingBreakdown { channel: String, t: f64 },

    #[error("cannot transfer {requested} members from entry {from}: only {available} present")]
    InsufficientCount { from: u64, requested: u64, available: u64 },

    #[error("transfer of zero members")]
    ZeroTransfer,

    #[error("unknown ensemble id {0}")]
    UnknownId(u64),

    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("naive mode refuses N = {0} (limit 1000000)")]
    NaiveTooLarge(u64),

    #[error("{context}: {message}")]
    Io { context: String, message: String },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            context: context.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
