//! Desk-scale laboratory for adversarial patch attacks on dot-product
//! attention: a from-scratch tensor tape, a toy vision transformer, the
//! key-query patch loss family, a PGD patch optimizer, a controlled
//! single-token vulnerability study, and attention diagnostics.

pub mod attack;
pub mod attention;
pub mod checkpoint;
pub mod controlled;
pub mod diagnostics;
pub mod data;
pub mod error;
pub mod loss;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod vit;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{finite_difference_gradient, Gradients, NodeId, Tape};
pub use tensor::Tensor;
