//! PAC-Bayes training and risk certification for variational autoencoders.

pub mod certificate;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod pacbayes;
pub mod vae;

pub use error::{Error, Result};
