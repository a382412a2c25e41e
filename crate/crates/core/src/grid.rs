//! Uniform grids on `[0, 1]` and `[0, 1]^2`.
//!
//! Two-dimensional grids are tensor products. Points are enumerated row-major
//! with the first axis outer and the second axis inner, i.e. point `(ix, iy)`
//! has flat index `ix * ny + iy`. The same convention is used for `vec(G)` of
//! a kernel `G(x, y)` sampled on a product grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing nodes on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid1D {
    points: Vec<f64>,
}

impl Grid1D {
    /// `k` evenly spaced nodes including both endpoints.
    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 points, got {k}")));
        }
        let denom = (k - 1) as f64;
        let points = (0..k).map(|i| i as f64 / denom).collect();
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("grid needs at least 2 points"));
        }
        if points.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::invalid("grid points must lie in [0, 1]"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid points must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Spacing of a uniform grid.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.points.len() - 1) as f64
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.spacing();
        self.points
            .iter()
            .enumerate()
            .all(|(i, p)| (p - i as f64 * h).abs() <= 1e-12)
    }

    /// Every `stride`-th node; the last node must be hit exactly.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 || (self.len() - 1) % stride != 0 {
            return Err(Error::invalid(format!(
                "stride {stride} does not divide {} intervals",
                self.len() - 1
            )));
        }
        if self.is_uniform() {
            return Self::uniform((self.len() - 1) / stride + 1);
        }
        Self::from_points(self.points.iter().copied().step_by(stride).collect())
    }
}

impl TryFrom<Vec<f64>> for Grid1D {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::from_points(points)
    }
}

impl From<Grid1D> for Vec<f64> {
    fn from(g: Grid1D) -> Self {
        g.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x_grid: Grid1D,
    pub y_grid: Grid1D,
}

impl Grid2D {
    pub fn new(x_grid: Grid1D, y_grid: Grid1D) -> Self {
        Self { x_grid, y_grid }
    }

    pub fn uniform(k: usize) -> Result<Self> {
        let g = Grid1D::uniform(k)?;
        Ok(Self::new(g.clone(), g))
    }

    pub fn len(&self) -> usize {
        self.x_grid.len() * self.y_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.x_grid.len(), self.y_grid.len())
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.y_grid.len() + iy
    }

    pub fn point(&self, idx: usize) -> [f64; 2] {
        let ny = self.y_grid.len();
        [self.x_grid.points()[idx / ny], self.y_grid.points()[idx % ny]]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let (nx, ny) = self.shape();
        let (ix, iy) = (idx / ny, idx % ny);
        ix == 0 || iy == 0 || ix == nx - 1 || iy == ny - 1
    }

    pub fn subsample(&self, stride: usize) -> Result<Self> {
        Ok(Self::new(
            self.x_grid.subsample(stride)?,
            self.y_grid.subsample(stride)?,
        ))
    }
}

/// A 1D or 2D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    One(Grid1D),
    Two(Grid2D),
}

impl Grid {
    pub fn dim(&self) -> usize {
        match self {
            Grid::One(_) => 1,
            Grid::Two(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Grid::One(g) => g.len(),
            Grid::Two(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of node `idx`, `dim()` entries long.
    pub fn coords(&self, idx: usize) -> Vec<f64> {
        match self {
            Grid::One(g) => vec![g.points()[idx]],
            Grid::Two(g) => g.point(idx).to_vec(),
        }
    }

    /// All node coordinates, flattened node-major.
    pub fn coordinate_table(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|i| self.coords(i)).collect()
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        match self {
            Grid::One(g) => idx == 0 || idx == g.len() - 1,
            Grid::Two(g) => g.is_boundary(idx),
        }
    }

    pub fn subsample(&self, stride: usize) -> Result<Grid> {
        Ok(match self {
            Grid::One(g) => Grid::One(g.subsample(stride)?),
            Grid::Two(g) => Grid::Two(g.subsample(stride)?),
        })
    }

    /// Flat indices of the nodes kept by [`Grid::subsample`].
    pub fn subsample_indices(&self, stride: usize) -> Result<Vec<usize>> {
        let sub = self.subsample(stride)?;
        Ok(match (self, &sub) {
            (Grid::One(_), Grid::One(s)) => (0..s.len()).map(|i| i * stride).collect(),
            (Grid::Two(g), Grid::Two(s)) => {
                let (sx, sy) = s.shape();
                (0..sx)
                    .flat_map(|ix| (0..sy).map(move |iy| (ix, iy)))
                    .map(|(ix, iy)| g.index(ix * stride, iy * stride))
                    .collect()
            }
            _ => unreachable!(),
        })
    }

    pub fn as_1d(&self) -> Option<&Grid1D> {
        match self {
            Grid::One(g) => Some(g),
            Grid::Two(_) => None,
        }
    }

    pub fn as_2d(&self) -> Option<&Grid2D> {
        match self {
            Grid::Two(g) => Some(g),
            Grid::One(_) => None,
        }
    }
}

/// `k` nodes per axis in `dim` dimensions.
pub fn make_uniform_grid(k: usize, dim: usize) -> Result<Grid> {
    match dim {
        1 => Ok(Grid::One(Grid1D::uniform(k)?)),
        2 => Ok(Grid::Two(Grid2D::uniform(k)?)),
        _ => Err(Error::invalid(format!("dimension must be 1 or 2, got {dim}"))),
    }
}
