//! Core library for compiling chest X-ray annotation sources into a
//! multi-task visual instruction corpus and scoring model outputs.
//!
//! The pipeline is organized as:
//!
//! - [`geometry`]: bounding-box algebra and the `[x1, y1, x2, y2]` text form
//! - [`ingest`]: per-dataset adapters and catalog assembly
//! - [`labeler`]: observation-label endpoints (stub, file, remote)
//! - [`conversation`]: template rendering into multi-turn samples
//! - [`mixer`]: deterministic weighted sampling over task-dataset pools
//! - [`metrics`]: clinical F1, BLEU/ROUGE-L, grounding, and VQA scoring
//! - [`corpus`]: corpus record serialization, manifests, validation
//! - [`config`]: the build configuration file
//! - [`pipeline`]: build / mix / eval / validate / stats entry points

pub mod config;
pub mod conversation;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod labeler;
pub mod metrics;
pub mod mixer;
pub mod pipeline;

pub use error::{Error, Result};

/// Tool version recorded in manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
