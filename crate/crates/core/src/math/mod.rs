//! Dense matrices and reverse-mode differentiation.

mod matrix;
mod tape;

pub use matrix::{
    argmax, dot, l2_normalize_rows, matmul, matmul_transa, matmul_transb, norm, softmax_rows,
    Matrix, NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};
