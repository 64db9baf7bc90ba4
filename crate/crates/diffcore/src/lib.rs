//! Minimal reverse-mode automatic differentiation over dense row-major arrays.
//!
//! The primitive set is closed: matrix products, broadcasting arithmetic,
//! normalisation, activations, convolution, layout ops, pooling, gathers and
//! the MSE reduction. Everything else (attention, BCE, adaLN) is composed.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;

pub use array::Array;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use graph::{sigmoid, softplus, Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamStore};
pub use rng::CounterRng;
pub use scalar::Scalar;
