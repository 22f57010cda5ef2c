//! Unified sequence-to-sequence framework for multi-goal conversational
//! recommendation.
//!
//! Goal planning, topic prediction, item recommendation and response
//! generation are all cast as text-to-text tasks with task prompts, learned
//! by one encoder-decoder through multi-task training followed by per-task
//! prompt tuning, and run at inference as a goal → topic → item → response
//! pipeline.

pub mod backbone;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod serialize;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
