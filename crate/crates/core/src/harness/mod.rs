//! Run configuration, run manifests, stage-wise orchestration and the
//! subset-training ablation.

pub mod ablation;
pub mod config;
pub mod manifest;
pub mod workflow;

pub use ablation::{ablate_subset, ablation_csv, AblationRow};
pub use config::RunConfig;
pub use manifest::{ensure_writable, RunManifest};
