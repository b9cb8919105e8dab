//! Linear-algebra kernels: sparse storage, direct solvers, saddle-point
//! systems and symmetric generalized eigenproblems.

mod banded;
mod eigen;
mod saddle;
mod skyline;
mod sparse;

pub use banded::BandedLu;
pub use eigen::{
    dense_generalized_eig, extreme_generalized_eigenvalue, lanczos_max, Extreme, DENSE_LIMIT,
};
pub use saddle::{solve_saddle, SaddleSolution};
pub use skyline::{solve_spd, solve_spd_tol, SkylineCholesky};
pub use sparse::{CsrMatrix, TripletMatrix};
