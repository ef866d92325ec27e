//! The unified transformer: vocabulary layout, sequence layouts and the
//! attention mask, configuration, parameters and the forward pass.

pub mod config;
pub mod layout;
pub mod transformer;
pub mod vocab;

pub use config::ModelConfig;
pub use layout::{build_omni_mask, SegmentLayout, SegmentTag, SequenceFormat, TokenSeq};
pub use transformer::{bind, forward_graph, forward_with_patterns, init_model, Model};
pub use vocab::VocabLayout;
