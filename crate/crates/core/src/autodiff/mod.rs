//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every network and loss in the crate is written against [`Var`] handles
//! recorded on a [`Tape`]. A forward pass appends entries in topological
//! order; [`Tape::backward`] walks them once in reverse, summing adjoints
//! for values with several consumers.
//!
//! ```
//! use gca::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(0.0));
//! let y = x.scale(2.0).unwrap().sigmoid().unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert!((grads.get(&x).unwrap().item().unwrap() - 0.5).abs() < 1e-12);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, DEFAULT_EPS};
pub use tape::{forward, sigmoid, Gradients, Primitive, Tape, Var, NUMERIC_FLOOR};
pub use tensor::Tensor;

/// Applies a primitive to values already recorded on one tape.
pub fn apply_primitive(kind: Primitive, inputs: &[&Var]) -> crate::Result<Var> {
    let first = inputs
        .first()
        .ok_or_else(|| crate::Error::InvalidArgument("primitive needs at least one input".into()))?;
    first.tape().apply(kind, inputs)
}
