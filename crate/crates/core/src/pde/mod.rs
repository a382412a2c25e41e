//! Ground-truth problems: the 1D Helmholtz-type boundary-value problem with a
//! closed-form Green's function, and 2D Darcy flow solved by finite differences.

mod darcy;
mod helmholtz;

pub use darcy::{sample_darcy_coefficient, solve_darcy_fd, CoefficientSpec, DarcyProblem};
pub use helmholtz::{greens_function, legendre_rhs, solve_helmholtz, HelmholtzProblem};
