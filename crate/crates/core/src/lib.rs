//! Self-supervised low-level feature learning feeding vision transformers.
//!
//! A residual ConvNet is pretrained with BYOL (optionally with a leaky rectifier
//! in the projector and predictor), its early stages are frozen, and their
//! feature maps are tokenized for a ViT, CVT or CCT classifier.

pub mod augment;
pub mod backbone;
pub mod byol;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
