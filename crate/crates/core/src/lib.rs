//! Lifelong editing of a toy autoregressive model.
//!
//! The pipeline keeps the base model frozen and writes edits into masked
//! side-memory copies of one FFN value matrix. Activation-score routing
//! picks between main and side memories at inference time; similarity-formed
//! batches are trained with an inner-batch distillation loss; a closed-loop
//! controller pools failed edits, prunes the worst shard, and retrains; and
//! shard deltas are periodically folded into main memory with a loss-aware
//! sign-resolving merge.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod engine;
pub mod error;
pub mod feedback;
pub mod memory;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod sample;
pub mod verify;

pub use error::{Error, Result};
