//! Multi-turn red-team evaluation engine for LLM endpoints.
//!
//! The pipeline has three stages per behavior: network construction (goal ->
//! topics -> samples -> entities -> query chains), feedback-driven simulation
//! with refine-and-prune, and adaptive turn-by-turn execution with early
//! stopping. Reporting covers attack success rate and semantic diversity.
//! Every stage runs fully offline against deterministic scripted backends.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod semantic;
pub mod state;
pub mod simulator;
pub mod thoughtnet;
pub mod transcript;
pub mod traverser;

pub use error::{Error, Result};
