//! Contrastive pretraining with amortized partition functions.
//!
//! The encoders are trained by maximum likelihood on an energy-based model
//! whose per-sample partition functions are predicted by small networks
//! (amortizers) instead of being recomputed from in-batch negatives. A
//! standard two-directional NCE (CLIP) trainer is included as the baseline.

pub mod amortization;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mlp;
pub mod numerics;
pub mod spectral;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
