pub mod error;
mod binio;
pub mod ei;
pub mod relenc;
pub mod sr;
pub mod data;
pub mod numcore;
pub mod harness;

pub use error::{Error, Result};

/// Scalar type used by every model above the tensor engine.
pub type Real = f64;
pub type Tensor = numcore::Tensor<Real>;
pub type Graph<'a> = numcore::Graph<'a, Real>;
pub type Gradients = numcore::Gradients<Real>;
pub type AdamState = numcore::AdamState<Real>;
