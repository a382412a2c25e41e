//! Bayesian uncertainty quantification for neural operators.
//!
//! The crate covers two routes to a Gaussian predictive over PDE solutions:
//!
//! * the shallow case, where a Gaussian-process prior on a Green's function
//!   is conditioned on integral observations ([`gp`]);
//! * the deep case, where a layered neural operator ([`operator`]) is
//!   trained to a MAP estimate and a last-layer Laplace approximation
//!   ([`laplace`]) is fitted post hoc.
//!
//! Ground-truth generators live in [`pde`], calibration metrics and figure
//! exports in [`diagnostics`].

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod gp;
pub mod grid;
pub mod laplace;
pub mod linalg;
pub mod operator;
pub mod pde;
pub mod quadrature;
pub mod table;

pub use error::{Error, Result};
pub use field::Field;
pub use grid::{make_uniform_grid, Grid, Grid1D, Grid2D};
pub use quadrature::{
    assemble_integral_operator, integrate, quadrature_weights, IntegralOperatorMatrix,
    QuadratureRule, Scheme,
};
