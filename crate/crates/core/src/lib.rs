//! Hierarchical nested-basis (H²) matrices and the multiscale neural
//! networks that generalize their matrix-vector product.

pub mod error;
pub mod h2;
pub mod io;
pub mod layers;
pub mod model;
pub mod pde;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Padding, Real, Tensor};
