//! Shared inputs for the benchmarks.

use bno_core::dataset::{darcy_dataset, DarcyDataSpec, OperatorDataset};
use bno_core::gp::GpObservationSet;
use bno_core::pde::{legendre_rhs, solve_helmholtz, HelmholtzProblem};
use bno_core::{make_uniform_grid, Field, Grid, Grid1D, QuadratureRule};
use nalgebra::DMatrix;

pub fn rule(k: usize, dim: usize) -> QuadratureRule {
    QuadratureRule::trapezoid(make_uniform_grid(k, dim).expect("valid grid")).expect("valid rule")
}

/// Legendre right-hand sides and their Helmholtz solutions on `k` nodes.
pub fn helmholtz_observations(k: usize, n: usize, noise: f64) -> GpObservationSet {
    let r = rule(k, 1);
    let g = r.nodes().as_1d().expect("1D").clone();
    let problem = HelmholtzProblem::new(4.5).expect("valid problem");
    let rhs: Vec<Field> = (0..n).map(|d| legendre_rhs(d, &g)).collect();
    let sol: Vec<Field> = rhs.iter().map(|f| solve_helmholtz(&problem, f, &r).expect("solve")).collect();
    GpObservationSet::from_pairs(&rhs, &sol, &r, noise).expect("observations")
}

pub fn darcy(n: usize, grid: usize) -> OperatorDataset {
    darcy_dataset(&DarcyDataSpec {
        n_samples: n,
        seed: 1,
        grid_size: grid,
        solve_size: 4 * (grid - 1) + 1,
        coefficient: Default::default(),
    })
    .expect("dataset")
}

pub fn grid_1d(k: usize) -> Grid {
    Grid::One(Grid1D::uniform(k).expect("valid grid"))
}

/// Deterministic feature matrix with entries in `[-0.5, 0.5)`.
pub fn features(n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |i, j| ((i * 31 + j * 17) as f64 * 0.618).fract() - 0.5)
}
