use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid, Grid2D};
use crate::linalg::BandedSpd;

/// `-∇·(λ ∇u) = f` on the unit square with `u = 0` on the boundary.
#[derive(Debug, Clone)]
pub struct DarcyProblem {
    coefficient: Field,
    forcing: Field,
}

impl DarcyProblem {
    pub fn new(coefficient: Field, forcing: Field) -> Result<Self> {
        if coefficient.grid().as_2d().is_none() {
            return Err(Error::invalid("Darcy coefficient must live on a 2D grid"));
        }
        if coefficient.grid() != forcing.grid() {
            return Err(Error::invalid("coefficient and forcing grids differ"));
        }
        if let Some(v) = coefficient.values().iter().find(|v| **v <= 0.0) {
            return Err(Error::invalid(format!("coefficient must be positive, found {v}")));
        }
        Ok(Self {
            coefficient,
            forcing,
        })
    }

    /// Unit forcing `f ≡ 1`.
    pub fn with_unit_forcing(coefficient: Field) -> Result<Self> {
        let forcing = Field::constant(coefficient.grid().clone(), 1.0);
        Self::new(coefficient, forcing)
    }

    pub fn coefficient(&self) -> &Field {
        &self.coefficient
    }

    pub fn forcing(&self) -> &Field {
        &self.forcing
    }

    pub fn grid(&self) -> &Grid2D {
        self.coefficient.grid().as_2d().expect("checked in constructor")
    }

    /// Assembles the 5-point conservative stencil on interior nodes, ordered
    /// x-major like the grid. Face coefficients are harmonic means.
    pub fn assemble(&self) -> Result<(BandedSpd, Vec<f64>)> {
        let g = self.grid();
        let (nx, ny) = g.shape();
        if nx < 3 || ny < 3 {
            return Err(Error::invalid("Darcy grid needs an interior node"));
        }
        if !g.x_grid.is_uniform() || !g.y_grid.is_uniform() {
            return Err(Error::invalid("Darcy solver requires a uniform grid"));
        }
        let (hx2, hy2) = (g.x_grid.spacing().powi(2), g.y_grid.spacing().powi(2));
        let (mx, my) = (nx - 2, ny - 2);
        let lam = self.coefficient.values();
        let at = |ix: usize, iy: usize| lam[g.index(ix, iy)];
        let harm = |a: f64, b: f64| 2.0 * a * b / (a + b);
        let unknown = |ix: usize, iy: usize| (ix - 1) * my + (iy - 1);

        let mut a = BandedSpd::zeros(mx * my, my);
        let mut rhs = vec![0.0; mx * my];
        for ix in 1..nx - 1 {
            for iy in 1..ny - 1 {
                let p = unknown(ix, iy);
                let c = at(ix, iy);
                let east = harm(c, at(ix + 1, iy)) / hx2;
                let west = harm(c, at(ix - 1, iy)) / hx2;
                let north = harm(c, at(ix, iy + 1)) / hy2;
                let south = harm(c, at(ix, iy - 1)) / hy2;
                a.add(p, p, east + west + north + south);
                if ix > 1 {
                    a.add(p, unknown(ix - 1, iy), -west);
                }
                if iy > 1 {
                    a.add(p, unknown(ix, iy - 1), -south);
                }
                rhs[p] = self.forcing.values()[g.index(ix, iy)];
            }
        }
        Ok((a, rhs))
    }
}

/// Finite-difference solution on all grid nodes, zero on the boundary.
pub fn solve_darcy_fd(problem: &DarcyProblem) -> Result<Field> {
    let (a, rhs) = problem.assemble()?;
    let interior = a.cholesky()?.solve(&rhs);
    let g = problem.grid();
    let (nx, ny) = g.shape();
    let my = ny - 2;
    let mut u = vec![0.0; g.len()];
    for ix in 1..nx - 1 {
        for iy in 1..ny - 1 {
            u[g.index(ix, iy)] = interior[(ix - 1) * my + (iy - 1)];
        }
    }
    Field::new(Grid::Two(g.clone()), u).map_err(|_| {
        Error::SingularSystem("Darcy solve produced non-finite values".into())
    })
}

/// Law of the random permeability: Gaussian white noise smoothed with a
/// Gaussian filter of standard deviation `smoothing_length`, thresholded at
/// zero into two levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSpec {
    pub low: f64,
    pub high: f64,
    pub smoothing_length: f64,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        Self {
            low: 3.0,
            high: 12.0,
            smoothing_length: 0.1,
        }
    }
}

fn gaussian_filter(length: f64, h: f64) -> Vec<f64> {
    if length == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * length / h).ceil() as i64;
    (-radius..=radius)
        .map(|d| {
            let r = d as f64 * h;
            (-(r * r) / (2.0 * length * length)).exp()
        })
        .collect()
}

pub fn sample_darcy_coefficient(seed: u64, grid: &Grid2D, spec: &CoefficientSpec) -> Result<Field> {
    if !(spec.low > 0.0 && spec.high > 0.0) {
        return Err(Error::invalid("coefficient levels must be positive"));
    }
    if !(spec.smoothing_length >= 0.0) {
        return Err(Error::invalid("smoothing length must be nonnegative"));
    }
    let (nx, ny) = grid.shape();
    let kx = gaussian_filter(spec.smoothing_length, grid.x_grid.spacing());
    let ky = gaussian_filter(spec.smoothing_length, grid.y_grid.spacing());
    let (px, py) = (kx.len() / 2, ky.len() / 2);
    let (wx, wy) = (nx + 2 * px, ny + 2 * py);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..wx * wy).map(|_| StandardNormal.sample(&mut rng)).collect();

    // filter along y, keeping all padded rows
    let mut along_y = vec![0.0; wx * ny];
    for ix in 0..wx {
        for iy in 0..ny {
            along_y[ix * ny + iy] = ky
                .iter()
                .enumerate()
                .map(|(d, k)| k * noise[ix * wy + iy + d])
                .sum();
        }
    }
    let mut values = Vec::with_capacity(nx * ny);
    for ix in 0..nx {
        for iy in 0..ny {
            let s: f64 = kx
                .iter()
                .enumerate()
                .map(|(d, k)| k * along_y[(ix + d) * ny + iy])
                .sum();
            values.push(if s > 0.0 { spec.high } else { spec.low });
        }
    }
    Ok(Field::new(Grid::Two(grid.clone()), values)?.with_name(format!("coefficient_{seed}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_uniform_grid;
    use std::f64::consts::PI;

    fn grid(k: usize) -> Grid2D {
        Grid2D::uniform(k).unwrap()
    }

    fn manufactured_error(k: usize) -> f64 {
        let g = Grid::Two(grid(k));
        let exact = |c: &[f64]| (PI * c[0]).sin() * (PI * c[1]).sin();
        let f = Field::from_fn(g.clone(), |c| 2.0 * PI * PI * exact(c));
        let p = DarcyProblem::new(Field::constant(g.clone(), 1.0), f).unwrap();
        let u = solve_darcy_fd(&p).unwrap();
        let truth = Field::from_fn(g, exact);
        u.values()
            .iter()
            .zip(truth.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_solution_second_order() {
        let e: Vec<f64> = [17, 33, 65].iter().map(|&k| manufactured_error(k)).collect();
        for w in e.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.3, "errors {e:?}");
        }
    }

    #[test]
    fn zero_forcing_zero_solution() {
        let g = make_uniform_grid(9, 2).unwrap();
        let lam = sample_darcy_coefficient(3, g.as_2d().unwrap(), &CoefficientSpec::default()).unwrap();
        let p = DarcyProblem::new(lam, Field::zeros(g)).unwrap();
        assert!(solve_darcy_fd(&p).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn boundary_is_zero_and_solution_nonnegative() {
        let g2 = grid(17);
        for seed in 0..5 {
            let lam = sample_darcy_coefficient(seed, &g2, &CoefficientSpec::default()).unwrap();
            let u = solve_darcy_fd(&DarcyProblem::with_unit_forcing(lam).unwrap()).unwrap();
            for (i, v) in u.values().iter().enumerate() {
                if g2.is_boundary(i) {
                    assert_eq!(*v, 0.0);
                } else {
                    assert!(*v > 0.0);
                }
            }
        }
    }

    #[test]
    fn stencil_is_symmetric_positive_definite() {
        let g2 = grid(7);
        let lam = sample_darcy_coefficient(11, &g2, &CoefficientSpec::default()).unwrap();
        let (a, _) = DarcyProblem::with_unit_forcing(lam).unwrap().assemble().unwrap();
        let dense = a.to_dense();
        assert_eq!(dense, dense.transpose());
        assert!(nalgebra::Cholesky::new(dense).is_some());
    }

    #[test]
    fn rejects_nonpositive_coefficient() {
        let g = make_uniform_grid(5, 2).unwrap();
        let mut v = vec![1.0; 25];
        v[12] = 0.0;
        let lam = Field::new(g.clone(), v).unwrap();
        assert!(DarcyProblem::new(lam, Field::zeros(g)).is_err());
        let bad = CoefficientSpec {
            low: -1.0,
            ..Default::default()
        };
        assert!(sample_darcy_coefficient(0, &grid(5), &bad).is_err());
    }

    #[test]
    fn equal_levels_give_constant_field() {
        let spec = CoefficientSpec {
            low: 5.0,
            high: 5.0,
            smoothing_length: 0.1,
        };
        let f = sample_darcy_coefficient(9, &grid(16), &spec).unwrap();
        assert!(f.values().iter().all(|v| *v == 5.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = sample_darcy_coefficient(42, &grid(16), &CoefficientSpec::default()).unwrap();
        let b = sample_darcy_coefficient(42, &grid(16), &CoefficientSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = sample_darcy_coefficient(43, &grid(16), &CoefficientSpec::default()).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn high_fraction_is_one_half() {
        let spec = CoefficientSpec::default();
        let g = grid(16);
        let mut high = 0usize;
        let mut total = 0usize;
        for seed in 0..1000 {
            let f = sample_darcy_coefficient(seed, &g, &spec).unwrap();
            high += f.values().iter().filter(|v| **v == spec.high).count();
            total += f.len();
        }
        let frac = high as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.05, "fraction {frac}");
    }
}
