use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: axis `{axis}` expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("id {id} at frame {frame} is outside the vocabulary of size {size}")]
    Vocabulary { frame: usize, id: usize, size: usize },

    #[error("value {value} at frame {frame} outside [{min}, {max}]")]
    Range {
        frame: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("window [{start}, {end}) outside track of length {len}")]
    Bounds { start: usize, end: usize, len: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("track `{track}`: annotations have {annotation_frames} frames, features have {feature_frames}")]
    Alignment {
        track: String,
        annotation_frames: usize,
        feature_frames: usize,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("input too short: {frames} frames but the block size is {block}; pad the annotations to at least {block} frames")]
    TooShort { frames: usize, block: usize },

    #[error("probability {0} outside the open interval (0, 1)")]
    Probability(f64),

    #[error("non-finite {what} at epoch {epoch}, step {step} (batch windows as (training track, start frame): {windows:?})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        windows: Vec<(usize, usize)>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by the numerics rather than by user input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
