use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in layer {layer} ({kind}): {detail}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale trace: recorded against network {trace_net} v{trace_version}, network is {net} v{version}")]
    StaleTrace {
        trace_net: u64,
        trace_version: u64,
        net: u64,
        version: u64,
    },
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
