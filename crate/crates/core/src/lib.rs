//! Multi-scale invertible flow whose final latent is split along channels
//! into semantically disentangled factors, trained on image pairs that
//! share one factor.

// `Float` is f64 unless the `f32` feature is on, so casts to f64 are only
// no-ops in the default build. Negated comparisons deliberately reject NaN.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod latent;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use rng::Rng;
pub use tensor::{Float, Tensor};
