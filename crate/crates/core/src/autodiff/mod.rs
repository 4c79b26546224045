//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Parameters enter as
//! leaves with `requires_grad`, data enters as constants, and
//! [`Tape::backward`] distributes the gradient of a scalar loss back to the
//! leaves, accumulating when a value is consumed more than once.
//!
//! ```
//! use gtagcn::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
//! let b = tape.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
//! let y = tape.matmul(a, b).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
//! ```

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, rel_err, GradCheckReport, FD_STEP};
pub use tape::{BnState, Reduce, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
