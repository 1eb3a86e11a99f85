use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WsolError {
    #[error(transparent)]
    Tensor(#[from] wsol_tensor::TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("CAM has no positive response; cannot fit a Gaussian")]
    EmptyCam,

    #[error("thresholds must satisfy 0 <= t_bg < t_fg <= 1, got t_bg={t_bg}, t_fg={t_fg}")]
    BadThresholds { t_bg: f64, t_fg: f64 },

    #[error("cannot evaluate an empty record list")]
    EmptyRecords,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("stage {stage} requires artifacts that are missing: {}", missing.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts {
        stage: &'static str,
        missing: Vec<PathBuf>,
    },

    #[error("non-finite loss {value} at step {step}; aborting training")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("checkpoint at {dir} is missing parameter {name}")]
    MissingParameter { dir: PathBuf, name: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<WsolError>,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl WsolError {
    /// Wraps an error with the name of the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> WsolError {
        match self {
            already @ WsolError::Stage { .. } => already,
            other => WsolError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Stage name attached via [`WsolError::in_stage`], if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            WsolError::Stage { stage, .. } => Some(stage),
            WsolError::MissingArtifacts { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, WsolError>;
