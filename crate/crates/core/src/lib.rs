//! Numerical engine for in-context portrait transfer.
//!
//! The crate covers the deterministic machinery end to end: masked
//! dual-condition construction ([`masking`]), cost-volume dense matching
//! ([`matching`]), warping and annealed residual aggregation of multi-level
//! features ([`warpagg`]), noise schedules and samplers ([`diffusion`]),
//! analytic and trainable toy denoisers ([`toynets`]), progressive inference
//! ([`inference`]), a procedural view-pair generator with exact
//! correspondence ([`synthdata`]) and identity-similarity statistics
//! ([`metrics`]). The [`cli`] module exposes all of it as subcommands.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod masking;
pub mod matching;
pub mod metrics;
mod seeding;
pub mod synthdata;
pub mod tensor;
pub mod toynets;
pub mod warpagg;

pub use error::{Error, Result};
pub use tensor::Tensor;
