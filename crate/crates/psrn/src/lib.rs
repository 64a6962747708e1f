//! Pose-based two-stream relational network for action recognition at desk
//! scale: a temporal pose stream with soft attention over person detections
//! and position/velocity LSTMs, a spatial object stream over feature-map
//! grids, a relational fusion of the two, and the three-loss, three-stage
//! training procedure — all differentiable through `numcore` and verified
//! by finite differences.

pub mod cli;
pub mod config;
mod error;
pub mod eval;
pub mod gradchecks;
pub mod model;
pub mod objectstream;
pub mod posedata;
pub mod posestream;
pub mod relnet;
pub mod training;

pub use config::{RunConfig, Seeds};
pub use error::{PsrnError, Result};
pub use model::{
    prepare_dataset, validate_checkpoint, ModelConfig, ObjectStreamKind, ObjectsSource,
    PreparedDataset, PreparedVideo, PsrnModel,
};
