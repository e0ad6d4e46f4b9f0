//! Desk-scale laboratory for fully differentiable mixture-of-experts
//! language models with causal segment routing.

pub mod analysis;
pub mod batching;
pub mod diffcore;
pub mod error;
pub mod model;
pub mod par;
pub mod routing;
pub mod training;

pub use error::{Error, Result};
