//! Rehearsal-based continual learning with logit-consistency regularization.
//!
//! The crate implements the full pipeline for desk-scale continual-learning
//! experiments on MLP backbones: a reverse-mode autodiff tape ([`autodiff`]),
//! the classifier and its optimizer ([`model`]), a reservoir replay buffer
//! storing inputs, labels, and the logits observed at insertion time
//! ([`buffer`]), the family of consistency losses that anchor current logits
//! to those stored logits ([`regularizers`]), stream protocols and data
//! handling ([`data`]), the training loop ([`trainer`]), evaluation metrics
//! ([`metrics`]), and the config-driven experiment runner ([`experiment`]).

pub mod autodiff;
pub mod augment;
pub mod buffer;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod regularizers;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
