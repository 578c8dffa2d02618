//! Multi-view multi-representation self-supervised learning.
//!
//! Embeddings of an original and an augmented view are trained to agree
//! (MSE), to keep per-dimension spread (variance hinge), and to be maximally
//! distance-correlated with each other and with a bank of fixed hand-crafted
//! image representations. The same machinery distills a frozen teacher whose
//! embedding width differs from the student's.

pub mod augment;
pub mod config;
pub mod depmeasure;
pub mod data;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod model;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
