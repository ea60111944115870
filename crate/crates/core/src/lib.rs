//! Multi-modal re-identification: tokenizers, expert-routed encoders,
//! token-level feature mixture, retrieval objective and evaluation protocol.

pub mod assembler;
pub mod augment;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod model;
pub mod modality;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use modality::Modality;
