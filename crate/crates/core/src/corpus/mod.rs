//! Corpus construction: validity filters, transcript tools, label projection
//! and the synthetic corpus generator.

pub mod filters;
pub mod synth;
pub mod text;

pub use synth::{generate, Corpus, SyntheticSpec, SyntheticVideo};
pub use text::{project_labels, prototype, LabelRecord, ManifestRecord, Template};
