//! Numerical building blocks: pseudoinverse, sieve least squares, logistic
//! regression, kernel smoothing, and a damped Newton root solver.

pub mod kernel;
pub mod logistic;
pub mod newton;
pub mod pinv;
pub mod sieve;

pub use kernel::{kernel_fit, KernelModel, KernelOptions};
pub use logistic::{logistic_fit, LogisticModel};
pub use newton::{newton_solve, NewtonOptions, NewtonSolution};
pub use pinv::{pinv, pinv_with_floor, DEFAULT_REL_TOL};
pub use sieve::{
    design_matrix, ridge_solve, sieve_fit, sieve_fit_scalar, SieveModel, SieveSpec, Standardizer,
    RIDGE_EPS,
};
