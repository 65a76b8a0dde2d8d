use thiserror::Error;

pub type Result<T> = std::result::Result<T, TaseError>;

#[derive(Error, Debug)]
pub enum TaseError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no voiced frames")]
    NoVoicedFrames,
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Nnet(#[from] tase_nnet::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TaseError::InvalidInput(msg.into()))
}
