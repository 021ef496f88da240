//! Contrastive self-supervised speech representation toolkit.

pub mod asr;
pub mod cli;
pub mod cpc;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod masked;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use features::FeatureMatrix;
pub use tensor::{Tape, Tensor};
