//! Contrastive self-supervised speaker embeddings.
//!
//! NT-Xent losses with an optional additive margin (in-batch, symmetric and
//! queue-based), SimCLR and MoCo training on top of a small reverse-mode
//! autodiff core, log-mel features, a synthetic speaker corpus with
//! augmentation, and the verification metrics used to score the result.

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod seed;
pub mod synthdata;
pub mod trainers;

pub use error::{Error, Result};
