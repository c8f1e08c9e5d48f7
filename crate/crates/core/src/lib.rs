//! Question-conditioned dynamic parameter prediction.
//!
//! A question is encoded by a GRU into `h_T`, projected to a small vector of
//! candidate weights `p`, and `p` is spread over the weight matrix of one
//! fully-connected layer of the answer classifier through a pair of hashes.
//! The classifier therefore computes a different function for every question
//! while the number of predicted values stays at `K`.

pub mod batchnorm;
pub mod checkpoint;
pub mod data;
pub mod dynamic;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod hashing;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod probe;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
