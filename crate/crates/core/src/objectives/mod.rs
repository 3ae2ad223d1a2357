//! Stage-1 training objectives: contrastive alignment over the fine-grained
//! similarity, masked captioning, masked language modelling, and the loop
//! that optimises their mean.

pub mod losses;
pub mod masking;
pub mod pretrain;

pub use losses::{sample_plans, BatchPlans, LossSettings, Prompts, Sample};
pub use masking::MaskingPlan;
pub use pretrain::{train_stage1, CurveRow, TrainConfig};
