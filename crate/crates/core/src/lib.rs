//! Content encoders for cold-start item recommendation, trained with sparse
//! (α-entmax) contrastive objectives.
//!
//! Items are encoded from multimodal content features; users are the
//! normalized sum of the items they interacted with; any item, including one
//! never seen during training, is scored by cosine similarity. Training uses
//! a sampled α-entmax objective with in-batch negatives and optional
//! teacher-student distillation over item-item similarities.

pub mod compute;
pub mod data;
pub mod encoder;
pub mod entmax;
pub mod error;
pub mod eval;
pub mod model;
pub mod training;

pub use entmax::{Alpha, LogitVector, ProbabilityVector};
pub use error::{Error, Result};
