//! Policy-gradient user selection for LLM-based cold-start item augmentation.
//!
//! The pipeline: behavioral user features feed a selection policy; selected
//! users impersonated by an LLM (or a simulator) rank pairs of cold items;
//! the resulting triples train a two-tower retriever through an auxiliary
//! BPR loss; cold recall of the retriever is the policy's reward.
//!
//! See the `examples/` directory for one runnable program per stage.

pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod runner;
pub mod synthetic;
pub mod twotower;

pub use error::{Error, Result};
