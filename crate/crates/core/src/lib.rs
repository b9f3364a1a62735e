//! Interpretable image-based risk prediction.
//!
//! Raw image/query similarities are turned into per-image probability
//! vectors by a declarative [`schema`] of zero-shot tasks ([`features`]),
//! averaged per user, and fed to a from-scratch logistic regression
//! ([`glm`]). [`eval`] runs the repeated random-split AUC protocol and
//! [`stats`] the full-sample group comparisons. [`synth`] produces
//! deterministic cohorts in the same file formats [`embed_io`] reads.

pub mod embed_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod glm;
pub mod schema;
pub mod special;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use schema::{default_schema, parse_schema, TaskSchema};
