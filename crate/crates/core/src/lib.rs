//! Memory-enhanced invariant prompt learning for urban flow prediction.
//!
//! Flows live on a road or station graph. A memory bank of prototypes turns
//! each node-step embedding into an invariant and a variant prompt; a
//! spatio-temporal backbone predicts from the invariant prompts, and an
//! auxiliary predictor trained on intervened variant prompts penalises
//! predictions that depend on environment-specific patterns.

pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod intervention;
pub mod linalg;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod synth;
pub mod tape;
pub mod train;

pub use config::{Config, Variant};
pub use error::{MipError, Result};
