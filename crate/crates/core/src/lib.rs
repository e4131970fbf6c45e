//! Bigram-with-trigger language modelling lab: data generation, a small
//! two-layer attention model with hand-written gradients, training, probes,
//! associative-memory constructions and closed-form gradient analyses.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom fix the precision for common uses.

pub mod datagen;
pub mod embeddings;
pub mod error;
pub mod grad;
pub mod memories;
pub mod model;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod theory;
pub mod train;

pub use error::{LabError, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

pub type Embeddings64 = embeddings::EmbeddingSet<f64>;
pub type Embeddings32 = embeddings::EmbeddingSet<f32>;
pub type Params64 = model::ModelParams<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Grads64 = grad::Grads<f64>;
