//! Error and calibration metrics for Gaussian field predictions, and CSV
//! export of prediction panels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{coordinate_columns, coordinate_names};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::quadrature::QuadratureRule;
use crate::table::write_csv;

/// `‖mean − truth‖ / ‖truth‖` in the trapezoid-weighted L2 norm of the
/// common grid.
pub fn relative_l2(mean: &Field, truth: &Field) -> Result<f64> {
    if mean.grid() != truth.grid() {
        return Err(Error::invalid("relative_l2 needs fields on the same grid"));
    }
    let rule = QuadratureRule::trapezoid(truth.grid().clone())?;
    let w = rule.weights();
    let num: f64 = mean
        .values()
        .iter()
        .zip(truth.values())
        .zip(w)
        .map(|((m, t), w)| w * (m - t) * (m - t))
        .sum();
    let den: f64 = truth.values().iter().zip(w).map(|(t, w)| w * t * t).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("truth has zero norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Ranks starting at 1, ties receiving the average of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Median of finite values; `None` for an empty slice.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// Truth, predictive mean and std of one input, plus optional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub truth: Field,
    pub mean: Field,
    pub std: Field,
    pub samples: Vec<Field>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, truth: Field, mean: Field, std: Field) -> Result<Self> {
        let grid = truth.grid();
        if mean.grid() != grid || std.grid() != grid {
            return Err(Error::invalid("truth, mean and std must share a grid"));
        }
        if std.values().iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("std must be nonnegative"));
        }
        Ok(Self {
            id: id.into(),
            truth,
            mean,
            std,
            samples: Vec::new(),
        })
    }

    pub fn with_samples(mut self, samples: Vec<Field>) -> Result<Self> {
        if samples.iter().any(|s| s.grid() != self.truth.grid()) {
            return Err(Error::invalid("samples must share the record grid"));
        }
        self.samples = samples;
        Ok(self)
    }

    pub fn abs_error(&self) -> Vec<f64> {
        self.mean
            .values()
            .iter()
            .zip(self.truth.values())
            .map(|(m, t)| (m - t).abs())
            .collect()
    }

    pub fn relative_l2(&self) -> Result<f64> {
        relative_l2(&self.mean, &self.truth)
    }
}

/// Spearman correlation between `|mean − truth|` and std over grid points;
/// `None` when either is constant.
pub fn error_std_rank_correlation(record: &PredictionRecord) -> Result<Option<f64>> {
    if record.truth.len() < 10 {
        return Err(Error::invalid("rank correlation needs at least 10 grid points"));
    }
    Ok(spearman(&record.abs_error(), record.std.values()))
}

/// Fraction of grid points with `|mean − truth| ≤ z · std`.
pub fn interval_coverage(record: &PredictionRecord, z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::invalid("z must be positive"));
    }
    let inside = record
        .abs_error()
        .iter()
        .zip(record.std.values())
        .filter(|(e, s)| **e <= z * **s)
        .count();
    Ok(inside as f64 / record.truth.len() as f64)
}

/// Median std over the `fraction` of grid points with the largest error,
/// and the median std over all points.
pub fn worst_region_std(record: &PredictionRecord, fraction: f64) -> Result<(f64, f64)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction must lie in (0, 1]"));
    }
    let err = record.abs_error();
    let std = record.std.values();
    let mut idx: Vec<usize> = (0..err.len()).collect();
    idx.sort_by(|&a, &b| err[b].total_cmp(&err[a]));
    let k = ((fraction * err.len() as f64).ceil() as usize).clamp(1, err.len());
    let top: Vec<f64> = idx[..k].iter().map(|&i| std[i]).collect();
    Ok((median(&top).expect("nonempty"), median(std).expect("nonempty")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub id: String,
    pub file: String,
    pub rows: usize,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureManifest {
    pub config_hash: String,
    pub panels: Vec<PanelEntry>,
}

/// Writes one CSV per record (`x[,y],truth,mean,std,abs_error` then
/// `sample_k` columns) and `manifest.json` into `dir`, in record order.
pub fn export_figure_data(records: &[PredictionRecord], dir: &Path, config_hash: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut panels = Vec::with_capacity(records.len());
    let mut written = Vec::with_capacity(records.len() + 1);
    for r in records {
        let grid = r.truth.grid();
        let mut headers = coordinate_names(grid);
        let mut cols = coordinate_columns(grid);
        for (name, v) in [
            ("truth", r.truth.values().to_vec()),
            ("mean", r.mean.values().to_vec()),
            ("std", r.std.values().to_vec()),
            ("abs_error", r.abs_error()),
        ] {
            headers.push(name.into());
            cols.push(v);
        }
        for (k, s) in r.samples.iter().enumerate() {
            headers.push(format!("sample_{k}"));
            cols.push(s.values().to_vec());
        }
        let file = format!("{}.csv", r.id);
        let path = dir.join(&file);
        write_csv(&path, &headers, &cols)?;
        panels.push(PanelEntry {
            id: r.id.clone(),
            file,
            rows: grid.len(),
            columns: headers,
        });
        written.push(path);
    }
    let manifest = FigureManifest {
        config_hash: config_hash.into(),
        panels,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, Grid1D, Grid2D};
    use crate::table::{column, read_csv};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn line(n: usize) -> Grid {
        Grid::One(Grid1D::uniform(n).unwrap())
    }

    fn record(truth: Vec<f64>, mean: Vec<f64>, std: Vec<f64>) -> PredictionRecord {
        let g = line(truth.len());
        PredictionRecord::new(
            "r",
            Field::new(g.clone(), truth).unwrap(),
            Field::new(g.clone(), mean).unwrap(),
            Field::new(g, std).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn relative_error_scales_linearly() {
        let g = line(21);
        let t = Field::from_fn(g.clone(), |x| (3.0 * x[0]).sin() + 0.2);
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        assert!((relative_l2(&t.map(|v| 1.1 * v), &t).unwrap() - 0.1).abs() < 1e-14);
        assert!((relative_l2(&t.map(|v| 0.3 * v), &t).unwrap() - 0.7).abs() < 1e-14);
        assert!((relative_l2(&Field::zeros(g.clone()), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            relative_l2(&t, &Field::zeros(g)),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(relative_l2(&t, &Field::zeros(line(5))).is_err());
    }

    #[test]
    fn spearman_extremes_and_ties() {
        let err: Vec<f64> = (0..20).map(|i| (i as f64 * 1.7).sin().abs()).collect();
        let r = record(vec![0.0; 20], err.clone(), err.clone());
        assert!((error_std_rank_correlation(&r).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let r = record(vec![0.0; 20], err.clone(), err.iter().map(|e| (-3.0 * e).exp()).collect());
        assert!((error_std_rank_correlation(&r).unwrap().unwrap() + 1.0).abs() < 1e-12);
        let r = record(vec![0.0; 20], err.clone(), vec![0.5; 20]);
        assert_eq!(error_std_rank_correlation(&r).unwrap(), None);
        let short = record(vec![0.0; 5], vec![1.0; 5], vec![1.0; 5]);
        assert!(error_std_rank_correlation(&short).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_of_independent_samples_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rhos = Vec::new();
        for _ in 0..50 {
            let a: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
            rhos.push(spearman(&a, &b).unwrap());
        }
        assert!(rhos.iter().all(|r| r.abs() < 0.1));
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn coverage_limits_and_calibration() {
        let r = record(vec![0.0; 10], vec![1.0; 10], vec![1e9; 10]);
        assert_eq!(interval_coverage(&r, 1.0).unwrap(), 1.0);
        let r = record(vec![0.0; 10], vec![1.0; 10], vec![0.0; 10]);
        assert_eq!(interval_coverage(&r, 1.96).unwrap(), 0.0);
        assert!(interval_coverage(&r, 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let std: Vec<f64> = (0..n).map(|i| 0.1 + (i % 7) as f64).collect();
        let truth: Vec<f64> = std.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let r = record(truth, vec![0.0; n], std);
        let c = interval_coverage(&r, 1.96).unwrap();
        assert!((c - 0.95).abs() < 0.01, "coverage {c}");
        let mut prev = 0.0;
        for z in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let c = interval_coverage(&r, z).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn worst_region_selects_largest_errors() {
        let err: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let std: Vec<f64> = (0..20).map(|i| if i >= 18 { 5.0 } else { 1.0 }).collect();
        let (top, all) = worst_region_std(&record(vec![0.0; 20], err, std), 0.1).unwrap();
        assert_eq!((top, all), (5.0, 1.0));
    }

    #[test]
    fn rejects_negative_std() {
        let g = line(3);
        let f = Field::zeros(g.clone());
        let s = Field::new(g, vec![1.0, -1.0, 0.0]).unwrap();
        assert!(PredictionRecord::new("x", f.clone(), f, s).is_err());
    }

    #[test]
    fn export_round_trips_and_is_deterministic() {
        let g = Grid::Two(Grid2D::uniform(4).unwrap());
        let truth = Field::from_fn(g.clone(), |x| x[0] / 3.0 + x[1]);
        let mean = truth.map(|v| v * 1.01 + 1e-3);
        let std = Field::constant(g.clone(), 0.25);
        let samples = vec![mean.map(|v| v + 0.1), mean.map(|v| v - 0.1), mean.clone()];
        let r = PredictionRecord::new("panel_a", truth.clone(), mean.clone(), std)
            .unwrap()
            .with_samples(samples)
            .unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = export_figure_data(std::slice::from_ref(&r), d1.path(), "abc").unwrap();
        let f2 = export_figure_data(std::slice::from_ref(&r), d2.path(), "abc").unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        let (h, cols) = read_csv(&d1.path().join("panel_a.csv")).unwrap();
        assert_eq!(h, ["x", "y", "truth", "mean", "std", "abs_error", "sample_0", "sample_1", "sample_2"]);
        assert_eq!(column(&h, &cols, "truth").unwrap(), truth.values());
        assert_eq!(column(&h, &cols, "mean").unwrap(), mean.values());
        let m: FigureManifest = serde_json::from_str(&fs::read_to_string(d1.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.config_hash, "abc");
        assert_eq!(m.panels[0].rows, 16);
    }
}
