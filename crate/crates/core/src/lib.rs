//! Instance localization: a self-supervised pretext task that pastes a
//! foreground instance onto a different background and trains a momentum
//! contrastive encoder on RoIAlign features pooled at the pasted box.

pub mod boxes;
pub mod cli;
pub mod composition;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod oracle;
pub mod probes;
pub mod rng;
pub mod roialign;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
