//! Auto-parallel auto-regressive (APAR) decoding toolkit.
//!
//! A model that emits `[Fork]` asks the runtime to spawn a parallel thread
//! sharing its prefix; the thread is told it is a child by an injected
//! `[Child]` token. Generation is organised as a paragraph tree, cached in
//! refcounted KV blocks that are freed as soon as a thread finishes, and
//! restored to linear text at the end.
//!
//! Modules:
//! - [`tree`]: paragraph trees, validation, restore.
//! - [`kv`]: paged KV block accounting.
//! - [`sequence`]: sequences, groups and fork bookkeeping.
//! - [`attention`]: training masks and attended-token counts.
//! - [`engine`]: the decode loop and the AR baseline.
//! - [`script`]: deterministic scripted models.
//! - [`corpus`]: structure extraction from assistant responses.
//! - [`metrics`]: cache, attention and speed metrics.
//! - [`sim`]: continuous-batching serving simulator.

pub mod attention;
pub mod cli;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod kv;
pub mod metrics;
pub mod script;
pub mod sequence;
pub mod sim;
pub mod token;
pub mod tree;

pub use error::{AparError, Result};
pub use token::Token;
