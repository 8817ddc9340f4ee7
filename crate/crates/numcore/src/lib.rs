//! Dense `f64` tensors with tape-based reverse-mode differentiation, plus the
//! special functions needed by a Student-t likelihood.
//!
//! ```
//! use numcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
mod ops;
pub mod special;
mod tape;
mod tensor;

pub use ops::{sigmoid, softplus};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("did not converge: {0}")]
    NoConvergence(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NumError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
