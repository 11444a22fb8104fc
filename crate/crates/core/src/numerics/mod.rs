//! Dense tensors, FFTs, and reverse-mode differentiation.

pub mod autodiff;
pub mod fft;
pub mod tensor;

pub use autodiff::{concat_cols, concat_rows, grad, softmax_ce, softmax_ce_rows, GeluKind, Tape, Var};
pub use tensor::{Tensor, TokenMap};
