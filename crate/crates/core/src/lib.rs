//! Noise-robust cross-lingual cross-modal retrieval at desk scale.

pub mod config;
pub mod corpus;
pub mod diffmath;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod objectives;
pub mod params;
pub mod retrieval;
pub mod trainer;

pub use corpus::{Dataset, Instance, Split, WorldConfig};
pub use diffmath::Tensor;
pub use encoders::{FrameFeatureSequence, ModelParams, TokenSequence};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use objectives::LossWeights;
pub use retrieval::MetricsReport;
pub use trainer::TrainConfig;
