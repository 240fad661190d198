use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A required file is missing or could not be parsed.
    #[error("format error in {file}: {msg}")]
    Format { file: String, msg: String },

    /// Spot tables disagree on which spots exist.
    #[error("spot alignment error: {msg} (offending spots: {})", offenders.join(", "))]
    Alignment { msg: String, offenders: Vec<String> },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("spot {index} has an all-zero expression row")]
    DegenerateSpot { index: usize },

    #[error("spot {spot_id} at ({x}, {y}) lies outside the {width}x{height} image")]
    Bounds {
        spot_id: String,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("extractor backend '{backend}' failed: {msg} (check that the backend is reachable and retry)")]
    ExtractorBackend { backend: String, msg: String },

    #[error("feature extraction failed for spot {spot_id}: {source}")]
    SpotExtraction {
        spot_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("positional encoding error: {0}")]
    Encoding(String),

    /// Shapes or orderings handed to an operation do not line up.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite (last finite checkpoint: {})",
        last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        epoch: usize,
        batch: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate spot grid: {0}")]
    DegenerateGrid(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            msg: msg.into(),
        }
    }
}
