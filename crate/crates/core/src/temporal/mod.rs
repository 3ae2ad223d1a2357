//! Stage-2 temporal segmentation over per-clip feature sequences.

pub mod asformer;
pub mod bridge;
pub mod conv;
pub mod features;
pub mod loss;
pub mod model;
pub mod mstcn;
pub mod train;

pub use features::FeatureSequence;
pub use model::{FramePrediction, TemporalConfig, TemporalModel, Variant};
pub use train::{train_temporal, TemporalSample, TemporalTrainConfig};
