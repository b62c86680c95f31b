//! Dense real linear algebra used throughout the crate.

mod eigen;
mod fit;
mod matrix;
mod singular;

pub use eigen::{sym_eigen, sym_eigen_decompose, Spectrum, SymmetricEigen, SYMMETRY_TOLERANCE};
pub use fit::{loglog_slope, SlopeFit};
pub use matrix::{dot, norm2, DenseMatrix};
pub use singular::{
    least_squares, min_singular_value, numerical_rank, operator_norm, operator_norm_of,
    singular_values, LinearOperator, NormEstimate, PSEUDOINVERSE_THRESHOLD,
    RANK_RELATIVE_THRESHOLD,
};
