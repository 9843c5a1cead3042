//! Trainable adapter head for zero-shot anomaly localization.
//!
//! Frozen backbone outputs (multi-layer patch tokens, a CLS token and prompt
//! embeddings) are read from a small binary format, passed through bottleneck
//! adapters and compared by cosine similarity to produce per-pixel anomaly
//! maps. Training minimizes focal plus Dice loss on those maps together with a
//! CLS-guided calibration term; gradients are hand-derived and checked against
//! finite differences.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod feature_io;
pub mod head;
pub mod losses;
pub mod map_io;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
