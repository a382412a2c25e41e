//! Paired input/output fields and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one CSV per field with the
//! node coordinates followed by a `value` column.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid, Grid1D, Grid2D};
use crate::pde::{
    legendre_rhs, sample_darcy_coefficient, solve_darcy_fd, solve_helmholtz, CoefficientSpec,
    DarcyProblem, HelmholtzProblem,
};
use crate::quadrature::QuadratureRule;
use crate::table::{column, read_csv, write_csv};

/// One training or test pair. Darcy samples carry the coefficient `λ`;
/// Helmholtz samples only the right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSample {
    pub id: String,
    pub forcing: Field,
    pub coefficient: Option<Field>,
    pub solution: Field,
    /// Output nodes entering the loss; all nodes when `None`.
    pub mask: Option<Vec<usize>>,
}

impl OperatorSample {
    pub fn grid(&self) -> &Grid {
        self.solution.grid()
    }

    /// Number of output nodes entering the loss.
    pub fn observed_count(&self) -> usize {
        self.mask.as_ref().map_or(self.solution.len(), Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    grid: Grid,
    samples: Vec<OperatorSample>,
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: String,
    forcing: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coefficient: Option<String>,
    solution: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    grid: Grid,
    metadata: serde_json::Value,
    samples: Vec<SampleEntry>,
}

impl OperatorDataset {
    pub fn new(grid: Grid, samples: Vec<OperatorSample>, metadata: serde_json::Value) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &samples {
            let fields = [Some(&s.forcing), s.coefficient.as_ref(), Some(&s.solution)];
            if fields.iter().flatten().any(|f| f.grid() != &grid) {
                return Err(Error::invalid(format!("sample {} is not on the dataset grid", s.id)));
            }
            if let Some(m) = &s.mask {
                if m.iter().any(|&i| i >= grid.len()) {
                    return Err(Error::invalid(format!("mask of sample {} is out of range", s.id)));
                }
            }
            if !ids.insert(s.id.clone()) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            grid,
            samples,
            metadata,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[OperatorSample] {
        &self.samples
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Restricts the loss of every sample to `k` distinct interior nodes
    /// drawn with a seeded generator.
    pub fn with_random_masks(mut self, k: usize, seed: u64) -> Result<Self> {
        let interior: Vec<usize> = (0..self.grid.len()).filter(|&i| !self.grid.is_boundary(i)).collect();
        if k == 0 || k > interior.len() {
            return Err(Error::invalid(format!(
                "cannot pick {k} of {} interior nodes",
                interior.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut self.samples {
            let mut picked: Vec<usize> = sample(&mut rng, interior.len(), k)
                .into_iter()
                .map(|i| interior[i])
                .collect();
            picked.sort_unstable();
            s.mask = Some(picked);
        }
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let coord_names = coordinate_names(&self.grid);
        let coords = coordinate_columns(&self.grid);
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let write = |role: &str, f: &Field| -> Result<String> {
                let name = format!("{}_{role}.csv", s.id);
                let mut headers = coord_names.clone();
                headers.push("value".into());
                let mut cols = coords.clone();
                cols.push(f.values().to_vec());
                write_csv(&dir.join(&name), &headers, &cols)?;
                Ok(name)
            };
            entries.push(SampleEntry {
                id: s.id.clone(),
                forcing: write("forcing", &s.forcing)?,
                coefficient: s.coefficient.as_ref().map(|c| write("coefficient", c)).transpose()?,
                solution: write("solution", &s.solution)?,
                mask: s.mask.clone(),
            });
        }
        let manifest = Manifest {
            grid: self.grid.clone(),
            metadata: self.metadata.clone(),
            samples: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let grid = manifest.grid;
        let expected = coordinate_columns(&grid);
        let read = |name: &str, id: &str| -> Result<Field> {
            let p = dir.join(name);
            let (headers, cols) = read_csv(&p)?;
            for (n, want) in coordinate_names(&grid).iter().zip(&expected) {
                if column(&headers, &cols, n) != Some(want.as_slice()) {
                    return Err(Error::format(&p, format!("column {n} does not match the grid")));
                }
            }
            let values = column(&headers, &cols, "value")
                .ok_or_else(|| Error::format(&p, "missing value column"))?;
            Ok(Field::new(grid.clone(), values.to_vec())?.with_name(id))
        };
        let samples = manifest
            .samples
            .iter()
            .map(|e| {
                Ok(OperatorSample {
                    id: e.id.clone(),
                    forcing: read(&e.forcing, &e.id)?,
                    coefficient: e.coefficient.as_deref().map(|c| read(c, &e.id)).transpose()?,
                    solution: read(&e.solution, &e.id)?,
                    mask: e.mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, samples, manifest.metadata)
    }
}

pub(crate) fn coordinate_names(grid: &Grid) -> Vec<String> {
    match grid {
        Grid::One(_) => vec!["x".into()],
        Grid::Two(_) => vec!["x".into(), "y".into()],
    }
}

pub(crate) fn coordinate_columns(grid: &Grid) -> Vec<Vec<f64>> {
    (0..grid.dim())
        .map(|d| (0..grid.len()).map(|i| grid.coords(i)[d]).collect())
        .collect()
}

/// Shifted-Legendre right-hand sides of the given degrees with their
/// quadrature solutions on the rule's nodes.
pub fn helmholtz_dataset(problem: &HelmholtzProblem, degrees: &[usize], rule: &QuadratureRule) -> Result<OperatorDataset> {
    let grid = rule
        .nodes()
        .as_1d()
        .ok_or_else(|| Error::invalid("Helmholtz data needs a 1D rule"))?;
    let samples = degrees
        .iter()
        .map(|&n| {
            let f = legendre_rhs(n, grid);
            let u = solve_helmholtz(problem, &f, rule)?;
            Ok(OperatorSample {
                id: format!("legendre_{n}"),
                forcing: f,
                coefficient: None,
                solution: u.with_name(format!("legendre_{n}")),
                mask: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    OperatorDataset::new(
        Grid::One(grid.clone()),
        samples,
        serde_json::json!({"problem": "helmholtz", "lambda0": problem.lambda0(), "degrees": degrees}),
    )
}

/// Sampling protocol for Darcy pairs. Solutions are computed on a
/// `solve_size` grid and restricted to `grid_size` by striding, so data at
/// different resolutions come from the same continuum problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarcyDataSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub solve_size: usize,
    #[serde(default)]
    pub coefficient: CoefficientSpec,
}

/// Independent per-sample seeds derived from a base seed.
pub fn derive_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

pub fn darcy_dataset(spec: &DarcyDataSpec) -> Result<OperatorDataset> {
    if spec.grid_size < 3 || spec.solve_size < spec.grid_size {
        return Err(Error::invalid("Darcy grids need 3 <= grid_size <= solve_size"));
    }
    if (spec.solve_size - 1) % (spec.grid_size - 1) != 0 {
        return Err(Error::invalid(format!(
            "grid of {} nodes is not nested in a grid of {}",
            spec.grid_size, spec.solve_size
        )));
    }
    let stride = (spec.solve_size - 1) / (spec.grid_size - 1);
    let fine = Grid2D::uniform(spec.solve_size)?;
    let samples = derive_seeds(spec.seed, spec.n_samples)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let lam = sample_darcy_coefficient(s, &fine, &spec.coefficient)?;
            let u = solve_darcy_fd(&DarcyProblem::with_unit_forcing(lam.clone())?)
                .map_err(|e| Error::SingularSystem(format!("sample {i}: {e}")))?;
            let id = format!("darcy_{i:04}");
            let lam = lam.subsample(stride)?.with_name(&id);
            Ok(OperatorSample {
                id: id.clone(),
                forcing: Field::constant(lam.grid().clone(), 1.0).with_name(&id),
                coefficient: Some(lam),
                solution: u.subsample(stride)?.with_name(&id),
                mask: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    OperatorDataset::new(
        Grid::Two(Grid2D::new(Grid1D::uniform(spec.grid_size)?, Grid1D::uniform(spec.grid_size)?)),
        samples,
        serde_json::to_value(spec).expect("spec serializes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::Scheme;

    fn rule(k: usize) -> QuadratureRule {
        QuadratureRule::new(Grid::One(Grid1D::uniform(k).unwrap()), Scheme::Trapezoid).unwrap()
    }

    #[test]
    fn helmholtz_pairs() {
        let p = HelmholtzProblem::new(4.5).unwrap();
        let ds = helmholtz_dataset(&p, &(0..8).collect::<Vec<_>>(), &rule(9)).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.samples()[3].id, "legendre_3");
        assert_eq!(ds.samples()[0].solution.values()[0], 0.0);
    }

    #[test]
    fn darcy_pairs_are_nested_restrictions() {
        let spec = DarcyDataSpec {
            n_samples: 2,
            seed: 1,
            grid_size: 5,
            solve_size: 17,
            coefficient: CoefficientSpec::default(),
        };
        let ds = darcy_dataset(&spec).unwrap();
        assert_eq!(ds.grid().len(), 25);
        let s = &ds.samples()[1];
        let seed = derive_seeds(1, 2)[1];
        let fine = Grid2D::uniform(17).unwrap();
        let lam = sample_darcy_coefficient(seed, &fine, &CoefficientSpec::default()).unwrap();
        let u = solve_darcy_fd(&DarcyProblem::with_unit_forcing(lam.clone()).unwrap()).unwrap();
        assert_eq!(s.coefficient.as_ref().unwrap().values(), lam.subsample(4).unwrap().values());
        assert_eq!(s.solution.values(), u.subsample(4).unwrap().values());
        let bad = DarcyDataSpec { grid_size: 6, ..spec };
        assert!(darcy_dataset(&bad).is_err());
    }

    #[test]
    fn masks_are_seeded_interior_and_distinct() {
        let p = HelmholtzProblem::new(4.5).unwrap();
        let ds = helmholtz_dataset(&p, &[0, 1, 2], &rule(9)).unwrap();
        let a = ds.clone().with_random_masks(2, 7).unwrap();
        let b = ds.clone().with_random_masks(2, 7).unwrap();
        assert_eq!(a, b);
        for s in a.samples() {
            let m = s.mask.as_ref().unwrap();
            assert_eq!(m.len(), 2);
            assert!(m[0] < m[1] && m[0] > 0 && m[1] < 8);
            assert_eq!(s.observed_count(), 2);
        }
        assert!(ds.with_random_masks(8, 0).is_err());
    }

    #[test]
    fn save_load_round_trip_is_byte_stable() {
        let spec = DarcyDataSpec {
            n_samples: 3,
            seed: 4,
            grid_size: 5,
            solve_size: 9,
            coefficient: CoefficientSpec::default(),
        };
        let ds = darcy_dataset(&spec).unwrap().with_random_masks(2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(&dir.path().join("a")).unwrap();
        let back = OperatorDataset::load(&dir.path().join("a")).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in back.samples().iter().zip(ds.samples()) {
            assert_eq!(x.solution.values(), y.solution.values());
            assert_eq!(x.coefficient.as_ref().unwrap().values(), y.coefficient.as_ref().unwrap().values());
            assert_eq!(x.mask, y.mask);
        }
        back.save(&dir.path().join("b")).unwrap();
        for name in ["manifest.json", "darcy_0001_solution.csv"] {
            let a = fs::read(dir.path().join("a").join(name)).unwrap();
            let b = fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(a, b);
        }
        assert!(matches!(OperatorDataset::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_inconsistent_samples() {
        let g = Grid::One(Grid1D::uniform(3).unwrap());
        let other = Grid::One(Grid1D::uniform(4).unwrap());
        let s = OperatorSample {
            id: "a".into(),
            forcing: Field::zeros(g.clone()),
            coefficient: None,
            solution: Field::zeros(other),
            mask: None,
        };
        assert!(OperatorDataset::new(g.clone(), vec![s], serde_json::Value::Null).is_err());
        let s = OperatorSample {
            id: "a".into(),
            forcing: Field::zeros(g.clone()),
            coefficient: None,
            solution: Field::zeros(g.clone()),
            mask: None,
        };
        assert!(OperatorDataset::new(g, vec![s.clone(), s], serde_json::Value::Null).is_err());
    }
}
