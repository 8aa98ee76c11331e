//! Mask-conditioned fine-tuning of a CLIP-style vision transformer for
//! open-vocabulary mask classification, at desk scale.
//!
//! The pipeline: ground-truth masks are pooled onto the token grid, a fuser
//! turns each mask into an embedding, a parameterized similarity head refines
//! mask-text cosine scores, and the whole thing trains with cross-entropy.
//! Inference combines the resulting class probabilities with external mask
//! proposals.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod linalg;
pub mod params;
pub mod psm;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
