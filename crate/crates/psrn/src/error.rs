use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PsrnError {
    #[error(transparent)]
    Num(#[from] numcore::NumError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    /// Malformed binary or record content; offset given when known.
    #[error("format error in {what}: {details}")]
    Format { what: String, details: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A frame holds more detections than the common person count.
    #[error("frame {frame} of video {video_id:?} has {found} detections, capacity is {capacity}")]
    Capacity {
        video_id: String,
        frame: usize,
        found: usize,
        capacity: usize,
    },

    #[error("dataset has no detections in any frame")]
    EmptyDataset,

    #[error("sequence {0:?} has no frames")]
    EmptySequence(String),

    /// Missing input for an active loss or command.
    #[error("data error: {0}")]
    Data(String),

    /// A stage was requested before its prerequisite checkpoint exists.
    #[error("stage {stage} requires the stage {required} checkpoint at {path}")]
    StageDependency {
        stage: u32,
        required: u32,
        path: PathBuf,
    },

    /// Training diverged; names the offending tensors when identifiable.
    #[error("training aborted at step {step}: {details}")]
    Diverged { step: u64, details: String },
}

pub type Result<T> = std::result::Result<T, PsrnError>;

impl PsrnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PsrnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        PsrnError::Json {
            path: path.into(),
            source,
        }
    }
}
