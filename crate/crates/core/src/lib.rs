//! Multi-task case outcome classification over long fact descriptions.
//!
//! Allegation (Task B) and violation (Task A) are predicted per article from
//! precomputed token embeddings. Task A is conditioned on Task B features and
//! logits, and both tasks are regularised with a two-level contrastive loss.

pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod diff;
mod error;
pub mod metrics;
pub mod network;
pub mod training;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Task A is violation classification, Task B allegation classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    A,
    B,
}
