use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Samples of a scalar function on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "field has {} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite field value at node {i}")));
        }
        Ok(Self {
            grid,
            values,
            name: None,
        })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.coords(i))).collect();
        Self {
            grid,
            values,
            name: None,
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let values = vec![value; grid.len()];
        Self {
            grid,
            values,
            name: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| f(*v)).collect(),
            name: self.name.clone(),
        }
    }

    /// Multilinear interpolation onto `target`; exact where nodes coincide.
    pub fn interpolate(&self, target: &Grid) -> Result<Self> {
        if target == &self.grid {
            return Ok(self.clone());
        }
        let values = match (&self.grid, target) {
            (Grid::One(src), Grid::One(dst)) => dst
                .points()
                .iter()
                .map(|&t| {
                    let (i, a) = locate(src, t);
                    lerp(self.values[i], self.values[i + 1], a)
                })
                .collect(),
            (Grid::Two(src), Grid::Two(dst)) => (0..dst.len())
                .map(|idx| {
                    let [px, py] = dst.point(idx);
                    let (ix, ax) = locate(&src.x_grid, px);
                    let (iy, ay) = locate(&src.y_grid, py);
                    let v = |dx: usize, dy: usize| self.values[src.index(ix + dx, iy + dy)];
                    lerp(lerp(v(0, 0), v(0, 1), ay), lerp(v(1, 0), v(1, 1), ay), ax)
                })
                .collect(),
            _ => return Err(Error::invalid("cannot interpolate across dimensions")),
        };
        Ok(Self {
            grid: target.clone(),
            values,
            name: self.name.clone(),
        })
    }

    /// Restriction to every `stride`-th node per axis.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        let idx = self.grid.subsample_indices(stride)?;
        Ok(Self {
            grid: self.grid.subsample(stride)?,
            values: idx.iter().map(|&i| self.values[i]).collect(),
            name: self.name.clone(),
        })
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Cell `i` with `p[i] <= t <= p[i + 1]` and the fractional position in it.
fn locate(g: &crate::grid::Grid1D, t: f64) -> (usize, f64) {
    let p = g.points();
    let i = p.partition_point(|x| *x <= t).clamp(1, p.len() - 1) - 1;
    (i, ((t - p[i]) / (p[i + 1] - p[i])).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_uniform_grid;

    #[test]
    fn rejects_bad_values() {
        let g = make_uniform_grid(3, 1).unwrap();
        assert!(Field::new(g.clone(), vec![1.0, 2.0]).is_err());
        assert!(Field::new(g.clone(), vec![1.0, f64::NAN, 2.0]).is_err());
        assert!(Field::new(g, vec![1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn interpolation_is_exact_on_bilinear_functions() {
        let coarse = make_uniform_grid(5, 2).unwrap();
        let fine = make_uniform_grid(17, 2).unwrap();
        let f = |c: &[f64]| 1.0 + 2.0 * c[0] - c[1] + 3.0 * c[0] * c[1];
        let up = Field::from_fn(coarse, f).interpolate(&fine).unwrap();
        let truth = Field::from_fn(fine.clone(), f);
        for (a, b) in up.values().iter().zip(truth.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        // coinciding nodes are copied
        let back = truth.interpolate(&make_uniform_grid(5, 2).unwrap()).unwrap();
        assert_eq!(back.values(), truth.subsample(4).unwrap().values());
        assert!(truth.interpolate(&make_uniform_grid(4, 1).unwrap()).is_err());
    }

    #[test]
    fn subsample_keeps_values() {
        let g = make_uniform_grid(5, 2).unwrap();
        let f = Field::from_fn(g, |c| c[0] + 10.0 * c[1]);
        let s = f.subsample(2).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s.values()[4], f.values()[12]);
    }
}
