//! Minimal dense-tensor reverse-mode differentiation, sized for the MLPs
//! this project trains. All arithmetic is in f64 and every reduction runs in
//! a fixed order, so identical inputs give bitwise-identical outputs.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{softmax_rows, Tape, Var};
pub use tensor::Tensor;
