//! Dense arrays with reverse-mode automatic differentiation.

mod array;
mod fd;
mod tape;

pub use array::NdArray;
pub use fd::{finite_difference_grad, finite_difference_scalar};
pub use tape::{Gradients, Tape, Var};
