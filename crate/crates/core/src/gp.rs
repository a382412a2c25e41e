//! Gaussian-process inference of a Green's function from integral
//! observations.
//!
//! The prior `G ~ GP(μ, k)` lives on the product grid `x_nodes × y_nodes`
//! carried by the [`IntegralOperatorMatrix`] `A`. Observations are
//! `u = A vec(G) + ε` with `ε ~ N(0, σ² I)`. Conditioning is the discrete form
//! of the closed-form update
//!
//! ```text
//! E[G]   = μ_e + K_eg Aᵀ (A K_gg Aᵀ + σ² I)⁻¹ (u - A μ_g)
//! Cov[G] = K_ee - K_eg Aᵀ (A K_gg Aᵀ + σ² I)⁻¹ A K_ge
//! ```
//!
//! evaluated on an arbitrary product grid of evaluation points.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::{Grid, Grid1D, Grid2D};
use crate::linalg::{cholesky_with_jitter, log_det, JitteredCholesky};
use crate::quadrature::{assemble_integral_operator, IntegralOperatorMatrix, QuadratureRule};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn-5/2 correlation at distance `r` with lengthscale `l`.
pub fn matern52(r: f64, l: f64) -> f64 {
    let s = SQRT5 * r / l;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelStructure {
    Product,
    /// Average over swapping the two arguments of each input, which makes
    /// every posterior draw symmetric in `(x, y)`.
    #[default]
    ProductSymmetrized,
}

fn default_nu() -> f64 {
    2.5
}

fn default_output_scale() -> f64 {
    1.0
}

/// Product Matérn kernel `s² k_1(x_0, y_0) k_2(x_1, y_1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub lengthscales: [f64; 2],
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
    #[serde(default)]
    pub structure: KernelStructure,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            nu: 2.5,
            lengthscales: [0.2, 0.2],
            output_scale: 1.0,
            structure: KernelStructure::ProductSymmetrized,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nu != 2.5 {
            return Err(Error::invalid(format!("only nu = 2.5 is supported, got {}", self.nu)));
        }
        if self.lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lengthscales must be positive"));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::invalid("output scale must be positive"));
        }
        Ok(())
    }

    fn base(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let s2 = self.output_scale * self.output_scale;
        s2 * matern52((a[0] - b[0]).abs(), self.lengthscales[0])
            * matern52((a[1] - b[1]).abs(), self.lengthscales[1])
    }

    pub fn eval(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self.structure {
            KernelStructure::Product => self.base(a, b),
            KernelStructure::ProductSymmetrized => {
                let (sa, sb) = ([a[1], a[0]], [b[1], b[0]]);
                // pairs chosen so swapping either argument only permutes
                // commutative additions: the result is bitwise swap-invariant
                let direct = self.base(a, b) + self.base(sa, sb);
                let crossed = self.base(a, sb) + self.base(sa, b);
                0.25 * (direct + crossed)
            }
        }
    }
}

pub fn kernel_matrix(spec: &KernelSpec, a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval(a[i], b[j])))
}

/// Integral observations `u = A vec(G) + ε`.
#[derive(Debug, Clone)]
pub struct GpObservationSet {
    pub operator: IntegralOperatorMatrix,
    pub targets: Vec<f64>,
    pub noise_variance: f64,
}

impl GpObservationSet {
    pub fn new(operator: IntegralOperatorMatrix, targets: Vec<f64>, noise_variance: f64) -> Result<Self> {
        if operator.nrows() != targets.len() {
            return Err(Error::invalid(format!(
                "operator has {} rows but {} targets were given",
                operator.nrows(),
                targets.len()
            )));
        }
        if !(noise_variance >= 0.0) {
            return Err(Error::invalid("noise variance must be nonnegative"));
        }
        Ok(Self {
            operator,
            targets,
            noise_variance,
        })
    }

    /// Builds observations from right-hand sides and their solutions on the
    /// rule's nodes, using the nodes as output grid too.
    pub fn from_pairs(rhs: &[Field], solutions: &[Field], rule: &QuadratureRule, noise_variance: f64) -> Result<Self> {
        if rhs.len() != solutions.len() {
            return Err(Error::invalid("one solution is needed per right-hand side"));
        }
        let x_nodes = rule
            .nodes()
            .as_1d()
            .ok_or_else(|| Error::invalid("observations need a 1D rule"))?;
        let op = assemble_integral_operator(rhs, rule, x_nodes)?;
        let mut targets = Vec::with_capacity(op.nrows());
        for u in solutions {
            if u.grid() != rule.nodes() {
                return Err(Error::invalid("solution is not sampled on the output nodes"));
            }
            targets.extend_from_slice(u.values());
        }
        Self::new(op, targets, noise_variance)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn grid_points(&self) -> Vec<[f64; 2]> {
        self.operator.kernel_grid().points()
    }
}

/// Gaussian posterior over `G` on a product grid of evaluation points.
///
/// With a symmetrized kernel on a square grid, `(x, y)` and `(y, x)` are
/// perfectly correlated; the covariance is then held over the canonical
/// points `ix <= iy` only and mirrored.
#[derive(Debug, Clone)]
pub struct GpOperatorPosterior {
    eval_grid: Grid2D,
    canonical_of: Vec<usize>,
    representatives: Vec<usize>,
    prior_mean: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    factor_jitter: f64,
    observation_jitter: f64,
    alpha: DVector<f64>,
    observation_factor: Option<JitteredCholesky>,
}

impl GpOperatorPosterior {
    pub fn eval_grid(&self) -> &Grid2D {
        &self.eval_grid
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_field(&self) -> Field {
        Field::new(Grid::Two(self.eval_grid.clone()), self.mean.clone())
            .expect("finite posterior mean")
            .with_name("posterior_mean")
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Full covariance over all evaluation points.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.eval_grid.len();
        DMatrix::from_fn(n, n, |i, j| {
            self.covariance[(self.canonical_of[i], self.canonical_of[j])]
        })
    }

    pub fn canonical_covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower Cholesky factor of the canonical covariance (plus jitter).
    pub fn covariance_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn factor_jitter(&self) -> f64 {
        self.factor_jitter
    }

    /// Jitter that was added to `A K Aᵀ + σ² I` before factorization.
    pub fn observation_jitter(&self) -> f64 {
        self.observation_jitter
    }

    /// `(A K Aᵀ + σ² I)⁻¹ (u - A μ)`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn observation_factor(&self) -> Option<&JitteredCholesky> {
        self.observation_factor.as_ref()
    }

    fn expand(&self, canonical: &[f64]) -> Vec<f64> {
        self.canonical_of.iter().map(|&c| canonical[c]).collect()
    }
}

/// Maps every eval point to a canonical index; returns (canonical_of, representatives).
fn canonical_points(grid: &Grid2D, structure: KernelStructure) -> (Vec<usize>, Vec<usize>) {
    let (nx, ny) = grid.shape();
    if structure == KernelStructure::ProductSymmetrized && grid.x_grid == grid.y_grid {
        let mut canonical_of = vec![0; nx * ny];
        let mut reps = Vec::new();
        for ix in 0..nx {
            for iy in ix..ny {
                canonical_of[grid.index(ix, iy)] = reps.len();
                canonical_of[grid.index(iy, ix)] = reps.len();
                reps.push(grid.index(ix, iy));
            }
        }
        (canonical_of, reps)
    } else {
        ((0..nx * ny).collect(), (0..nx * ny).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Conditions the GP prior `(spec, mean_fn)` on `obs` and evaluates the
/// posterior on `eval_grid`.
pub fn posterior(
    spec: &KernelSpec,
    mean_fn: impl Fn([f64; 2]) -> f64,
    obs: &GpObservationSet,
    eval_grid: &Grid2D,
) -> Result<GpOperatorPosterior> {
    spec.validate()?;
    let (canonical_of, reps) = canonical_points(eval_grid, spec.structure);
    let eval_pts: Vec<[f64; 2]> = reps.iter().map(|&i| eval_grid.point(i)).collect();
    let prior_mean_c: Vec<f64> = eval_pts.iter().map(|p| mean_fn(*p)).collect();
    let k_cc = kernel_matrix(spec, &eval_pts, &eval_pts)?;

    let (mean_c, cov, alpha, obs_factor) = if obs.is_empty() {
        (prior_mean_c.clone(), k_cc, DVector::zeros(0), None)
    } else {
        let grid_pts = obs.grid_points();
        let a = obs.operator.matrix();
        let k_gg = kernel_matrix(spec, &grid_pts, &grid_pts)?;
        let ak = a * &k_gg;
        let mut s = &ak * a.transpose();
        for i in 0..s.nrows() {
            s[(i, i)] += obs.noise_variance;
        }
        let chol = cholesky_with_jitter(&s)?;
        let mu_g: Vec<f64> = grid_pts.iter().map(|p| mean_fn(*p)).collect();
        let a_mu = obs.operator.apply(&mu_g)?;
        let resid = DVector::from_iterator(
            obs.len(),
            obs.targets.iter().zip(&a_mu).map(|(u, m)| u - m),
        );
        let alpha = chol.factor.solve(&resid);

        // C = K_cg Aᵀ, one row per canonical eval point
        let k_cg = kernel_matrix(spec, &eval_pts, &grid_pts)?;
        let c = &k_cg * a.transpose();
        let mean_c: Vec<f64> = (0..eval_pts.len())
            .map(|i| {
                let row: Vec<f64> = c.row(i).iter().copied().collect();
                prior_mean_c[i] + dot(&row, alpha.as_slice())
            })
            .collect();
        let l = chol.factor.l();
        let v = l
            .solve_lower_triangular(&c.transpose())
            .ok_or(Error::IllConditioned { jitter: chol.jitter })?;
        let mut cov = k_cc - v.transpose() * &v;
        // restore exact symmetry lost to rounding in the product
        for i in 0..cov.nrows() {
            for j in 0..i {
                let m = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = m;
                cov[(j, i)] = m;
            }
        }
        (mean_c, cov, alpha, Some(chol))
    };

    let factor = cholesky_with_jitter(&cov)?;
    let variance_c: Vec<f64> = cov.diagonal().iter().copied().collect();
    let mut post = GpOperatorPosterior {
        eval_grid: eval_grid.clone(),
        canonical_of,
        representatives: reps,
        prior_mean: Vec::new(),
        mean: Vec::new(),
        variance: Vec::new(),
        observation_jitter: obs_factor.as_ref().map_or(0.0, |c| c.jitter),
        covariance: cov,
        factor: factor.factor.l(),
        factor_jitter: factor.jitter,
        alpha,
        observation_factor: obs_factor,
    };
    post.prior_mean = post.expand(&prior_mean_c);
    post.mean = post.expand(&mean_c);
    post.variance = post.expand(&variance_c);
    Ok(post)
}

/// Posterior with the zero prior mean.
pub fn posterior_zero_mean(spec: &KernelSpec, obs: &GpObservationSet, eval_grid: &Grid2D) -> Result<GpOperatorPosterior> {
    posterior(spec, |_| 0.0, obs, eval_grid)
}

/// Draws `mean + L z`, deterministic in `seed`.
pub fn sample_posterior(post: &GpOperatorPosterior, n_samples: usize, seed: u64) -> Vec<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = post.representatives.len();
    let mean_c: Vec<f64> = post.representatives.iter().map(|&i| post.mean[i]).collect();
    (0..n_samples)
        .map(|s| {
            let z = DVector::from_iterator(nc, (0..nc).map(|_| StandardNormal.sample(&mut rng)));
            let lz = &post.factor * z;
            let draw: Vec<f64> = mean_c.iter().zip(lz.iter()).map(|(m, d)| m + d).collect();
            Field::new(Grid::Two(post.eval_grid.clone()), post.expand(&draw))
                .expect("finite draw")
                .with_name(format!("sample_{s}"))
        })
        .collect()
}

/// Gaussian over a gridded function: mean, pointwise std, optional full covariance.
#[derive(Debug, Clone)]
pub struct GaussianPrediction {
    pub mean: Field,
    pub std: Field,
    pub covariance: Option<DMatrix<f64>>,
}

/// Pushes the posterior over `G` through `G ↦ ∫ G(·, y) f*(y) dy`.
///
/// The posterior must have been evaluated on `x_eval × rule.nodes`.
pub fn predict_solution(
    post: &GpOperatorPosterior,
    f_star: &Field,
    rule: &QuadratureRule,
    x_eval: &Grid1D,
) -> Result<GaussianPrediction> {
    let y_nodes = rule
        .nodes()
        .as_1d()
        .ok_or_else(|| Error::invalid("prediction needs a 1D rule"))?;
    if &post.eval_grid.x_grid != x_eval || &post.eval_grid.y_grid != y_nodes {
        return Err(Error::invalid(
            "posterior was not evaluated on x_eval × quadrature nodes",
        ));
    }
    let b = assemble_integral_operator(std::slice::from_ref(f_star), rule, x_eval)?;
    let mean = b.apply(&post.mean)?;

    let nc = post.representatives.len();
    let mut b_c = DMatrix::zeros(b.nrows(), nc);
    for (e, &c) in post.canonical_of.iter().enumerate() {
        for r in 0..b.nrows() {
            b_c[(r, c)] += b.matrix()[(r, e)];
        }
    }
    let cov = &b_c * &post.covariance * b_c.transpose();
    let std: Vec<f64> = cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    let grid = Grid::One(x_eval.clone());
    Ok(GaussianPrediction {
        mean: Field::new(grid.clone(), mean)?,
        std: Field::new(grid, std)?,
        covariance: Some(cov),
    })
}

/// Log evidence of the observations under the zero-mean prior.
pub fn log_marginal_likelihood(spec: &KernelSpec, obs: &GpObservationSet) -> Result<f64> {
    spec.validate()?;
    if obs.is_empty() {
        return Ok(0.0);
    }
    let grid_pts = obs.grid_points();
    let a = obs.operator.matrix();
    let k_gg = kernel_matrix(spec, &grid_pts, &grid_pts)?;
    let mut s = a * k_gg * a.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] += obs.noise_variance;
    }
    let chol = cholesky_with_jitter(&s)?;
    let r = DVector::from_vec(obs.targets.clone());
    let alpha = chol.factor.solve(&r);
    let n = obs.len() as f64;
    Ok(-0.5 * r.dot(&alpha) - 0.5 * log_det(&chol.factor) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Picks the isotropic lengthscale with the highest evidence.
pub fn select_lengthscale(spec: &KernelSpec, obs: &GpObservationSet, candidates: &[f64]) -> Result<(KernelSpec, f64)> {
    let mut best: Option<(KernelSpec, f64)> = None;
    for &l in candidates {
        let s = KernelSpec {
            lengthscales: [l, l],
            ..*spec
        };
        let lml = log_marginal_likelihood(&s, obs)?;
        if best.as_ref().is_none_or(|(_, b)| lml > *b) {
            best = Some((s, lml));
        }
    }
    best.ok_or_else(|| Error::invalid("no lengthscale candidates"))
}
