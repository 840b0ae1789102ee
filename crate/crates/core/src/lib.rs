//! Event-aware video moment localization.
//!
//! The crate covers span geometry and matching, unsupervised pseudo-event
//! extraction, a small automatic-differentiation engine, the transformer
//! model with its event and moment reasoning stages, training losses,
//! dataset I/O, evaluation metrics and the training loop.

pub mod assignment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod event_reasoning;
pub mod geometry;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moment_reasoning;
pub mod params;
pub mod pseudo_events;
pub mod tensor;
pub mod training;

pub use assignment::{hungarian, Assignment, CostMatrix, CostWeights};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{FeatureSequence, GroundingSample, SyntheticConfig};
pub use error::{Error, Result};
pub use geometry::MomentSpan;
pub use losses::{LossComponents, LossWeights};
pub use metrics::{GroundingReport, RankedPredictions};
pub use model::{ModelConfig, ModelState};
pub use tensor::Matrix;
pub use training::{Profile, TrainConfig};
