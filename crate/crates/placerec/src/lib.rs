//! Visual place recognition with learnable-query aggregation, dual-level
//! domain-adversarial training, and a Recall@N retrieval evaluator.

pub mod adversarial;
pub mod autodiff;
pub mod backbone;
pub mod boq;
pub mod config;
pub mod data;
pub mod eval;
pub mod fileio;
pub mod losses;
pub mod nn;
pub mod train;
pub mod error;

pub use error::{Error, Result};
