//! Dense linear algebra, reverse-mode differentiation, Adam and least squares.

mod adam;
pub mod gradcheck;
mod graph;
mod linalg;
mod matrix;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use graph::{CompGraph, Gradients, NodeId};
pub use linalg::{
    cholesky_solve, gram_deviation, least_squares, lu_solve, orthonormalize_rows, r_squared,
    LeastSquaresFit,
};
pub use matrix::{dot, norm, DenseMatrix};
pub use mlp::{Linear, Mlp};
