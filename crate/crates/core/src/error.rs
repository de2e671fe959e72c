use thiserror::Error;

/// Errors produced anywhere in the forecasting stack.
#[derive(Debug, Error)]
pub enum UxError {
    #[error("dimension error on {axis}: {msg}")]
    Dimension { axis: &'static str, msg: String },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("event {event} has a vertex outside the grid bounds")]
    Bounds { event: usize },

    #[error("unknown event type `{0}`")]
    UnknownEventType(String),

    #[error("spectrum of channel {channel} carries no energy")]
    DegenerateSpectrum { channel: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("empty sample")]
    EmptySample,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("calendar field out of range: {0}")]
    Calendar(String),

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("no valid memory entry to attend to")]
    NoValidMemory,

    #[error("variable {channel} has zero variance over the fit set")]
    DegenerateVariable { channel: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("no climatology for month {month}, hour {hour}")]
    MissingClimatology { month: u32, hour: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl UxError {
    pub(crate) fn dim(axis: &'static str, msg: impl Into<String>) -> Self {
        UxError::Dimension { axis, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, UxError>;
