use thiserror::Error;

#[derive(Debug, Error)]
pub enum MivaError {
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("diffusion step {t} out of range (T = {total})")]
    StepOutOfRange { t: usize, total: usize },

    #[error("singular DDIM step: alpha at step {0} is zero")]
    SingularStep(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("mask cache is empty at DDIM index {0}; no mask-generation step has run yet")]
    EmptyMaskCache(usize),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("undefined centroid track: segmenter produced no mask pixels")]
    UndefinedTrack,

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MivaError>;

pub(crate) fn dim_err(context: &'static str, detail: impl Into<String>) -> MivaError {
    MivaError::Dimension {
        context,
        detail: detail.into(),
    }
}
