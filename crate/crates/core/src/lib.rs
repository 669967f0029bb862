//! Open-world learning toolkit: post-hoc OOD scorers, closed-form
//! rectification and sparsification theory, spectral analysis of
//! augmentation graphs, and prototype-based EM contrastive training.

pub mod data_io;
pub mod error;
pub mod metrics;
pub mod opencon;
pub mod rng;
pub mod scoring;
pub mod spectral;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
