//! Dual-group mixture-of-experts upcycling for a tiny decoder-only language
//! model, with spectral router features and a two-stage training pipeline on
//! synthetic translation data.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe;
pub mod pipeline;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
