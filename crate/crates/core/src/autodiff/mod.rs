//! Dense double-precision tensors with tape-based reverse-mode
//! differentiation.
//!
//! A [`Tape`] is created per forward pass. Inputs enter as constants or
//! variables, every operation records its output and a backward rule, and
//! [`Tape::backward`] consumes the tape to produce [`Gradients`].
//!
//! ```
//! use gsmn::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{wrap_angle, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::{cosine_raw, softplus};
