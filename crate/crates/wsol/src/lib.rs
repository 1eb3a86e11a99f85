//! Weakly supervised object localization on synthetic shape data.
//!
//! The crate covers the full pipeline: dataset synthesis, a multi-scale
//! fusion classifier that yields class activation maps, Gaussian-prior
//! pseudo labels, a class-agnostic segmentation network trained on those
//! labels, a standalone classifier, and box-level evaluation.

pub mod cam;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod error;
pub mod gppl;
pub mod localization;
pub mod mffnet;
pub mod nn;
pub mod pipeline;
pub mod seeding;
pub mod segmentation;
pub mod synthdata;
pub mod trunk;

pub use cam::CamMap;
pub use config::{Config, Fusion, UpsampleKind};
pub use error::{Result, WsolError};
pub use localization::{BBox, EvalRecord, Metrics};
