//! Last-layer Laplace approximation.
//!
//! The trained operator is split into a fixed feature map `φ(x)`, the
//! last-layer input `v_L(x)` with a constant 1 appended, and the affine
//! projection with weights `w = (P, b)`. With a Gaussian likelihood and
//! prior `N(0, τ⁻¹ I)` on `w`, the Hessian of the negative log posterior in
//! `w` is exactly
//!
//! ```text
//! Λ = ΦᵀΦ / σ² + τ I
//! ```
//!
//! and the predictive at `x` is `N(φ(x)ᵀ w_MAP, σ² + φ(x)ᵀ Λ⁻¹ φ(x))`.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::OperatorSample;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::linalg::log_det;
use crate::operator::{evaluate_on_grid_with_trace, forward_batch, ForwardTrace, NeuralOperatorParams};
use crate::quadrature::QuadratureRule;

/// Feature matrix `Φ`, one row per output point.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerFeatures {
    phi: DMatrix<f64>,
}

impl LastLayerFeatures {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(Self { phi })
    }

    /// Rows `φ(x_i) = (v_L(x_i), 1)` of a forward trace at the given nodes.
    pub fn from_trace(trace: &ForwardTrace, nodes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let c = trace.channels;
        let v = trace.features();
        let rows: Vec<usize> = nodes.into_iter().collect();
        let mut phi = DMatrix::zeros(rows.len(), c + 1);
        for (r, &i) in rows.iter().enumerate() {
            for ch in 0..c {
                phi[(r, ch)] = v[i * c + ch];
            }
            phi[(r, c)] = 1.0;
        }
        Self::new(phi)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }
}

fn observed_nodes(s: &OperatorSample) -> Vec<usize> {
    match &s.mask {
        Some(m) => m.clone(),
        None => (0..s.solution.len()).collect(),
    }
}

/// Last-layer weights `(P, b)` of a network with an affine projection.
pub fn map_weights(params: &NeuralOperatorParams) -> Result<Vec<f64>> {
    let (w, b) = params
        .projection()
        .ok_or_else(|| Error::Configuration("the last layer is not an affine projection".into()))?;
    let mut out = w.to_vec();
    out.push(b);
    Ok(out)
}

/// Features of every observed output point of `samples`, in sample order and
/// mask order within a sample.
pub fn extract_features(
    params: &NeuralOperatorParams,
    samples: &[OperatorSample],
    rule: &QuadratureRule,
) -> Result<LastLayerFeatures> {
    map_weights(params)?;
    let traces = forward_batch(params, samples, rule)?;
    let d = params.architecture().feature_dim();
    let total: usize = samples.iter().map(OperatorSample::observed_count).sum();
    let mut phi = DMatrix::zeros(total, d);
    let mut row = 0;
    for (s, t) in samples.iter().zip(&traces) {
        let part = LastLayerFeatures::from_trace(t, observed_nodes(s))?;
        phi.rows_mut(row, part.len()).copy_from(part.matrix());
        row += part.len();
    }
    LastLayerFeatures::new(phi)
}

/// Observed target values in the row order of [`extract_features`].
pub fn observed_targets(samples: &[OperatorSample]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|s| observed_nodes(s).into_iter().map(move |i| s.solution.values()[i]))
        .collect()
}

/// Sufficient statistics of the Bayesian linear model.
struct Gram {
    ptp: DMatrix<f64>,
    pty: DVector<f64>,
}

impl Gram {
    fn new(phi: &DMatrix<f64>, y: &[f64]) -> Self {
        Self {
            ptp: phi.tr_mul(phi),
            pty: phi.tr_mul(&DVector::from_column_slice(y)),
        }
    }

    fn precision(&self, tau: f64, sigma2: f64) -> DMatrix<f64> {
        let mut a = &self.ptp / sigma2;
        for i in 0..a.nrows() {
            a[(i, i)] += tau;
        }
        a
    }
}

fn check_hyper(tau: f64, sigma2: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) || !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid("tau and sigma2 must be positive and finite"));
    }
    Ok(())
}

fn factorize(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a).ok_or(Error::IllConditioned { jitter: 0.0 })
}

/// Exact log evidence `log N(y | 0, ΦΦᵀ/τ + σ² I)` through the
/// `d`-dimensional posterior: with `m = Λ⁻¹ Φᵀ y / σ²`,
/// `yᵀC⁻¹y = ‖y − Φm‖²/σ² + τ‖m‖²` and
/// `log det C = n log σ² − d log τ + log det Λ`.
fn evidence(phi: &DMatrix<f64>, y: &[f64], gram: &Gram, tau: f64, sigma2: f64) -> Result<f64> {
    let (n, d) = (phi.nrows() as f64, phi.ncols() as f64);
    let chol = factorize(gram.precision(tau, sigma2))?;
    let m = chol.solve(&(&gram.pty / sigma2));
    let fit = phi * &m;
    let rss: f64 = y.iter().zip(fit.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let quad = rss / sigma2 + tau * m.norm_squared();
    let logdet = n * sigma2.ln() - d * tau.ln() + log_det(&chol);
    Ok(-0.5 * (quad + logdet + n * (2.0 * std::f64::consts::PI).ln()))
}

/// Log marginal likelihood of the last-layer model with hyperparameters
/// `(τ, σ²)`.
pub fn log_marginal_likelihood(features: &LastLayerFeatures, targets: &[f64], tau: f64, sigma2: f64) -> Result<f64> {
    check_hyper(tau, sigma2)?;
    check_targets(features, targets)?;
    evidence(&features.phi, targets, &Gram::new(&features.phi, targets), tau, sigma2)
}

fn check_targets(features: &LastLayerFeatures, targets: &[f64]) -> Result<()> {
    if targets.len() != features.len() {
        return Err(Error::invalid(format!(
            "{} targets for {} feature rows",
            targets.len(),
            features.len()
        )));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("targets must be finite"));
    }
    Ok(())
}

/// Conjugate posterior mean `Λ⁻¹ Φᵀ y / σ²` of the last-layer weights.
pub fn linear_posterior_mean(features: &LastLayerFeatures, targets: &[f64], tau: f64, sigma2: f64) -> Result<Vec<f64>> {
    check_hyper(tau, sigma2)?;
    check_targets(features, targets)?;
    let gram = Gram::new(&features.phi, targets);
    let chol = factorize(gram.precision(tau, sigma2))?;
    Ok(chol.solve(&(&gram.pty / sigma2)).as_slice().to_vec())
}

/// Candidate values for the evidence grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub taus: Vec<f64>,
    pub sigma2s: Vec<f64>,
    /// Search once more on a finer grid spanning the neighbours of the best
    /// cell.
    #[serde(default)]
    pub refine: bool,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            taus: log_space(1e-4, 1e8, 13),
            sigma2s: log_space(1e-8, 1e2, 13),
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tau: f64,
    pub sigma2: f64,
    pub log_marginal_likelihood: f64,
}

fn search(phi: &DMatrix<f64>, y: &[f64], gram: &Gram, taus: &[f64], sigma2s: &[f64]) -> Result<Option<(usize, usize, f64)>> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, &tau) in taus.iter().enumerate() {
        for (j, &s2) in sigma2s.iter().enumerate() {
            check_hyper(tau, s2)?;
            let v = match evidence(phi, y, gram, tau, s2) {
                Ok(v) if v.is_finite() => v,
                _ => continue,
            };
            if best.map_or(true, |(_, _, b)| v > b) {
                best = Some((i, j, v));
            }
        }
    }
    Ok(best)
}

/// Finer grid between the neighbours of `vals[k]`; contains `vals[k]`.
fn refine_axis(vals: &[f64], k: usize, n: usize) -> Vec<f64> {
    let lo = vals[k.saturating_sub(1)];
    let hi = vals[(k + 1).min(vals.len() - 1)];
    let mut out = log_space(lo, hi, n);
    out.push(vals[k]);
    out
}

/// `(τ, σ²)` maximizing the log marginal likelihood over the grid.
pub fn tune_hyperparameters(features: &LastLayerFeatures, targets: &[f64], grid: &HyperGrid) -> Result<Hyperparameters> {
    if grid.taus.is_empty() || grid.sigma2s.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    check_targets(features, targets)?;
    let gram = Gram::new(&features.phi, targets);
    let (i, j, v) = search(&features.phi, targets, &gram, &grid.taus, &grid.sigma2s)?
        .ok_or_else(|| Error::UndefinedMetric("no grid point has a finite evidence".into()))?;
    let mut best = Hyperparameters {
        tau: grid.taus[i],
        sigma2: grid.sigma2s[j],
        log_marginal_likelihood: v,
    };
    if grid.refine {
        let taus = refine_axis(&grid.taus, i, 9);
        let sigma2s = refine_axis(&grid.sigma2s, j, 9);
        if let Some((a, b, w)) = search(&features.phi, targets, &gram, &taus, &sigma2s)? {
            if w > best.log_marginal_likelihood {
                best = Hyperparameters {
                    tau: taus[a],
                    sigma2: sigma2s[b],
                    log_marginal_likelihood: w,
                };
            }
        }
    }
    Ok(best)
}

/// Gaussian predictive over an output field.
#[derive(Debug, Clone)]
pub struct LaplacePrediction {
    pub mean: Field,
    pub std: Field,
    pub covariance: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    w_map: Vec<f64>,
    precision: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    tau: f64,
    sigma2: f64,
    log_marginal_likelihood: f64,
}

#[derive(Serialize, Deserialize)]
struct Artifact {
    tau: f64,
    sigma2: f64,
    d_last: usize,
    log_marginal_likelihood: f64,
    map_weights: Vec<f64>,
    factor_file: String,
    encoding: String,
}

const ARTIFACT_JSON: &str = "laplace.json";
const FACTOR_BIN: &str = "laplace_factor.bin";

impl LaplacePosterior {
    /// Posterior centred at `w_map` with precision `ΦᵀΦ/σ² + τI`.
    pub fn fit(features: &LastLayerFeatures, targets: &[f64], w_map: &[f64], tau: f64, sigma2: f64) -> Result<Self> {
        check_hyper(tau, sigma2)?;
        check_targets(features, targets)?;
        if w_map.len() != features.dim() {
            return Err(Error::invalid(format!(
                "{} weights for {} features",
                w_map.len(),
                features.dim()
            )));
        }
        let gram = Gram::new(&features.phi, targets);
        let precision = gram.precision(tau, sigma2);
        let factor = factorize(precision.clone())?;
        let log_marginal_likelihood = evidence(&features.phi, targets, &gram, tau, sigma2)?;
        Ok(Self {
            w_map: w_map.to_vec(),
            precision,
            factor,
            tau,
            sigma2,
            log_marginal_likelihood,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn d_last(&self) -> usize {
        self.w_map.len()
    }

    pub fn map_weights(&self) -> &[f64] {
        &self.w_map
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn factor(&self) -> &Cholesky<f64, Dyn> {
        &self.factor
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// Mean `Φ* w_MAP`, variances `σ² + φᵀΛ⁻¹φ` and optionally the full
    /// covariance `Φ* Λ⁻¹ Φ*ᵀ + σ² I` for a feature matrix.
    pub fn predict_features(&self, features: &LastLayerFeatures, full: bool) -> Result<(Vec<f64>, Vec<f64>, Option<DMatrix<f64>>)> {
        if features.dim() != self.d_last() {
            return Err(Error::invalid("feature dimension does not match the posterior"));
        }
        let phi = features.matrix();
        let mean = (0..phi.nrows())
            .map(|i| {
                phi.row(i)
                    .iter()
                    .zip(&self.w_map)
                    .fold(0.0, |acc, (a, b)| acc + b * a)
            })
            .collect();
        let mut z = phi.transpose();
        self.factor.l_dirty().solve_lower_triangular_mut(&mut z);
        let var = z.column_iter().map(|c| self.sigma2 + c.norm_squared()).collect();
        let cov = full.then(|| {
            let mut c = z.tr_mul(&z);
            for i in 0..c.nrows() {
                c[(i, i)] += self.sigma2;
            }
            c
        });
        Ok((mean, var, cov))
    }

    /// Predictive of the operator output for inputs `(λ, f)` on the nodes of
    /// `rule`; inputs on other grids are interpolated. The mean is the MAP
    /// network output.
    pub fn predict(
        &self,
        params: &NeuralOperatorParams,
        lambda: Option<&Field>,
        f: &Field,
        rule: &QuadratureRule,
        full_covariance: bool,
    ) -> Result<LaplacePrediction> {
        if map_weights(params)? != self.w_map {
            return Err(Error::Configuration(
                "posterior was fitted for a different last layer".into(),
            ));
        }
        let (mean, trace) = evaluate_on_grid_with_trace(params, lambda, f, rule)?;
        let features = LastLayerFeatures::from_trace(&trace, 0..trace.nodes())?;
        let (_, var, covariance) = self.predict_features(&features, full_covariance)?;
        let std = Field::new(rule.nodes().clone(), var.iter().map(|v| v.sqrt()).collect())?.with_name("std");
        Ok(LaplacePrediction {
            mean: mean.with_name("mean"),
            std,
            covariance,
        })
    }

    /// Writes `laplace.json` and the column-major Cholesky factor of `Λ` as
    /// little-endian `f64`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Artifact {
            tau: self.tau,
            sigma2: self.sigma2,
            d_last: self.d_last(),
            log_marginal_likelihood: self.log_marginal_likelihood,
            map_weights: self.w_map.clone(),
            factor_file: FACTOR_BIN.into(),
            encoding: "f64-le column-major lower".into(),
        };
        let path = dir.join(ARTIFACT_JSON);
        let json = serde_json::to_string_pretty(&meta).expect("serializable");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let bytes: Vec<u8> = self.factor.l().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(FACTOR_BIN);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(ARTIFACT_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Artifact = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let d = meta.d_last;
        let bad = |message: String| Error::Format {
            path: dir.join(&meta.factor_file),
            message,
        };
        if meta.map_weights.len() != d {
            return Err(bad(format!("{} weights for d_last {d}", meta.map_weights.len())));
        }
        let fpath = dir.join(&meta.factor_file);
        let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
        if bytes.len() != 8 * d * d {
            return Err(bad(format!("expected {} bytes, found {}", 8 * d * d, bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let l = DMatrix::from_vec(d, d, vals);
        let precision = &l * l.transpose();
        let factor = Cholesky::pack_dirty(l);
        Ok(Self {
            w_map: meta.map_weights,
            precision,
            factor,
            tau: meta.tau,
            sigma2: meta.sigma2,
            log_marginal_likelihood: meta.log_marginal_likelihood,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{darcy_dataset, DarcyDataSpec};
    use crate::operator::{forward, Architecture};
    use crate::pde::CoefficientSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_features(n: usize, d: usize, seed: u64) -> LastLayerFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LastLayerFeatures::new(DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    /// Kernel-form GP regression with `k(a, b) = φ(a)ᵀφ(b)/τ`, solved with
    /// an LU factorization of the `n × n` Gram matrix.
    fn gp_oracle(train: &DMatrix<f64>, y: &[f64], test: &DMatrix<f64>, tau: f64, s2: f64) -> (Vec<f64>, DMatrix<f64>) {
        let n = train.nrows();
        let kxx = train * train.transpose() / tau + DMatrix::identity(n, n) * s2;
        let ksx = test * train.transpose() / tau;
        let kss = test * test.transpose() / tau;
        let lu = kxx.lu();
        let alpha = lu.solve(&DVector::from_column_slice(y)).unwrap();
        let mean = (&ksx * alpha).as_slice().to_vec();
        let v = lu.solve(&ksx.transpose()).unwrap();
        let cov = kss - &ksx * v + DMatrix::identity(test.nrows(), test.nrows()) * s2;
        (mean, cov)
    }

    #[test]
    fn weight_space_matches_function_space() {
        for (k, (n, d)) in [(1usize, 1usize), (7, 3), (20, 16), (50, 9), (50, 16)].into_iter().enumerate() {
            let train = random_features(n, d, k as u64);
            let test = random_features(6, d, 100 + k as u64);
            let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            for (tau, s2) in [(0.5, 0.1), (3.0, 1e-2), (1e-2, 1.0)] {
                let w = linear_posterior_mean(&train, &y, tau, s2).unwrap();
                let post = LaplacePosterior::fit(&train, &y, &w, tau, s2).unwrap();
                let (mean, var, cov) = post.predict_features(&test, true).unwrap();
                let (m_ref, c_ref) = gp_oracle(train.matrix(), &y, test.matrix(), tau, s2);
                let cov = cov.unwrap();
                for i in 0..6 {
                    assert!((mean[i] - m_ref[i]).abs() < 1e-8);
                    assert!((var[i] - c_ref[(i, i)]).abs() < 1e-8);
                    for j in 0..6 {
                        assert!((cov[(i, j)] - c_ref[(i, j)]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn one_dimensional_regression_by_hand() {
        // φ = (1, 2, 3), y = (1, 2, 2), τ = 1, σ² = 0.5:
        // Λ = 14/0.5 + 1 = 29, m = (1 + 4 + 6)/0.5/29 = 22/29.
        let f = LastLayerFeatures::new(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let y = [1.0, 2.0, 2.0];
        let w = linear_posterior_mean(&f, &y, 1.0, 0.5).unwrap();
        assert!((w[0] - 22.0 / 29.0).abs() < 1e-15);
        let post = LaplacePosterior::fit(&f, &y, &w, 1.0, 0.5).unwrap();
        assert!((post.precision()[(0, 0)] - 29.0).abs() < 1e-13);
        let x = LastLayerFeatures::new(DMatrix::from_column_slice(1, 1, &[2.0])).unwrap();
        let (m, v, _) = post.predict_features(&x, false).unwrap();
        assert!((m[0] - 44.0 / 29.0).abs() < 1e-14);
        assert!((v[0] - (0.5 + 4.0 / 29.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_features_give_the_prior() {
        let f = LastLayerFeatures::new(DMatrix::zeros(4, 3)).unwrap();
        let post = LaplacePosterior::fit(&f, &[0.0; 4], &[0.0; 3], 2.0, 0.1).unwrap();
        assert_eq!(post.precision(), &(DMatrix::identity(3, 3) * 2.0));
    }

    #[test]
    fn strong_prior_collapses_variance_to_noise() {
        let f = random_features(30, 5, 3);
        let y = vec![0.3; 30];
        let s2 = 1e-2;
        let post = LaplacePosterior::fit(&f, &y, &[0.0; 5], 1e12, s2).unwrap();
        let (_, var, _) = post.predict_features(&random_features(40, 5, 4), false).unwrap();
        assert!(var.iter().all(|v| (v - s2).abs() <= 1e-6 * s2));
    }

    #[test]
    fn variance_is_at_least_noise_and_shrinks_with_data() {
        let f = random_features(25, 4, 5);
        let y: Vec<f64> = (0..25).map(|i| i as f64 / 25.0).collect();
        let test = random_features(10, 4, 6);
        let mut prev: Option<Vec<f64>> = None;
        for n in [0usize, 1, 5, 12, 25] {
            let sub = LastLayerFeatures::new(f.matrix().rows(0, n).into_owned()).unwrap();
            let post = LaplacePosterior::fit(&sub, &y[..n], &[0.0; 4], 0.7, 0.2).unwrap();
            let (_, var, _) = post.predict_features(&test, false).unwrap();
            assert!(var.iter().all(|v| *v >= 0.2));
            if let Some(p) = prev {
                assert!(var.iter().zip(&p).all(|(a, b)| *a <= *b + 1e-15));
            }
            prev = Some(var);
        }
        let zero = LastLayerFeatures::new(DMatrix::zeros(1, 4)).unwrap();
        let post = LaplacePosterior::fit(&f, &y, &[0.0; 4], 0.7, 0.2).unwrap();
        assert_eq!(post.predict_features(&zero, false).unwrap().1[0], 0.2);
    }

    #[test]
    fn evidence_matches_dense_gaussian_density() {
        let f = random_features(12, 3, 7);
        let y: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        for (tau, s2) in [(0.1, 0.3), (10.0, 1e-3)] {
            let c = f.matrix() * f.matrix().transpose() / tau + DMatrix::identity(12, 12) * s2;
            let chol = Cholesky::new(c.clone()).unwrap();
            let yv = DVector::from_column_slice(&y);
            let quad = yv.dot(&chol.solve(&yv));
            let dense = -0.5 * (quad + log_det(&chol) + 12.0 * (2.0 * std::f64::consts::PI).ln());
            let fast = log_marginal_likelihood(&f, &y, tau, s2).unwrap();
            assert!((dense - fast).abs() < 1e-9 * dense.abs().max(1.0));
        }
    }

    #[test]
    fn evidence_ignores_row_order() {
        let f = random_features(15, 4, 8);
        let y: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        let perm: Vec<usize> = (0..15).map(|i| (i * 7) % 15).collect();
        let pf = LastLayerFeatures::new(f.matrix().select_rows(&perm)).unwrap();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = log_marginal_likelihood(&f, &y, 0.4, 0.05).unwrap();
        let b = log_marginal_likelihood(&pf, &py, 0.4, 0.05).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs());
    }

    #[test]
    fn tuning_recovers_the_generating_noise() {
        let grid = HyperGrid {
            refine: false,
            ..HyperGrid::default()
        };
        let (n, d) = (2000, 5);
        let f = random_features(n, d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (tau, s2) = (grid.taus[5], grid.sigma2s[8]);
        let w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / tau.sqrt()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let m: f64 = (0..d).map(|k| f.matrix()[(i, k)] * w[k]).sum();
                m + s2.sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let h = tune_hyperparameters(&f, &y, &grid).unwrap();
        let j = grid.sigma2s.iter().position(|v| *v == h.sigma2).unwrap();
        assert!(j.abs_diff(8) <= 1, "selected sigma2 {}", h.sigma2);
    }

    #[test]
    fn refinement_never_lowers_the_maximum() {
        let f = random_features(40, 3, 11);
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let coarse = tune_hyperparameters(&f, &y, &HyperGrid { refine: false, ..HyperGrid::default() }).unwrap();
        let fine = tune_hyperparameters(&f, &y, &HyperGrid::default()).unwrap();
        assert!(fine.log_marginal_likelihood >= coarse.log_marginal_likelihood);
        let empty = HyperGrid {
            taus: vec![],
            ..HyperGrid::default()
        };
        assert!(matches!(tune_hyperparameters(&f, &y, &empty), Err(Error::InvalidArgument(_))));
    }

    fn tiny_network() -> (NeuralOperatorParams, Vec<OperatorSample>, QuadratureRule) {
        let spec = DarcyDataSpec {
            n_samples: 3,
            seed: 4,
            grid_size: 6,
            solve_size: 11,
            coefficient: CoefficientSpec::default(),
        };
        let ds = darcy_dataset(&spec).unwrap().with_random_masks(5, 1).unwrap();
        let rule = QuadratureRule::trapezoid(ds.grid().clone()).unwrap();
        let p = NeuralOperatorParams::init(Architecture::darcy(vec![6, 6], 4, 2, (3.0, 12.0)), 3).unwrap();
        (p, ds.samples().to_vec(), rule)
    }

    #[test]
    fn features_reproduce_the_network_output_bitwise() {
        let (p, samples, rule) = tiny_network();
        let w = map_weights(&p).unwrap();
        assert_eq!(w.len(), 5);
        let f = extract_features(&p, &samples, &rule).unwrap();
        assert_eq!(f.len(), 15);
        let post = LaplacePosterior::fit(&f, &observed_targets(&samples), &w, 1.0, 0.1).unwrap();
        for s in &samples {
            let (out, _) = forward(&p, s.coefficient.as_ref(), &s.forcing, &rule).unwrap();
            let pred = post.predict(&p, s.coefficient.as_ref(), &s.forcing, &rule, false).unwrap();
            assert_eq!(pred.mean.values(), out.values());
            let (_, trace) = forward(&p, s.coefficient.as_ref(), &s.forcing, &rule).unwrap();
            let phi = LastLayerFeatures::from_trace(&trace, 0..trace.nodes()).unwrap();
            let (m, _, _) = post.predict_features(&phi, false).unwrap();
            assert_eq!(m, out.values());
        }
    }

    #[test]
    fn network_without_projection_is_rejected() {
        let p = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![4]), 0).unwrap();
        assert!(matches!(map_weights(&p), Err(Error::Configuration(_))));
    }

    #[test]
    fn artifact_round_trip() {
        let f = random_features(10, 4, 12);
        let y = vec![1.0; 10];
        let post = LaplacePosterior::fit(&f, &y, &[0.1, 0.2, 0.3, 0.4], 0.5, 0.01).unwrap();
        let dir = tempfile::tempdir().unwrap();
        post.save(dir.path()).unwrap();
        let back = LaplacePosterior::load(dir.path()).unwrap();
        assert_eq!(back.map_weights(), post.map_weights());
        assert_eq!(back.factor().l(), post.factor().l());
        let test = random_features(5, 4, 13);
        assert_eq!(
            back.predict_features(&test, false).unwrap().1,
            post.predict_features(&test, false).unwrap().1
        );
    }
}
