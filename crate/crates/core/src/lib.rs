//! Masked-autoencoder pre-training of a small transformer encoder on
//! spectrogram tokens of chronic field-potential recordings, with a
//! 1/f-corrected reconstruction loss and leave-one-subject-out fine-tuning
//! for symptom regression.

pub mod error;
pub mod harness;
pub mod loss_scaling;
pub mod model;
pub mod seed;
pub mod spectral;
pub mod synthgen;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
