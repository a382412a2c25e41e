//! Self-checks that need no experiment output: the GP posterior against
//! dense Gaussian conditioning, reverse-mode gradients against central
//! differences, and the convergence order of the Darcy solver.

use bno_core::dataset::{darcy_dataset, helmholtz_dataset, DarcyDataSpec};
use bno_core::gp::{kernel_matrix, posterior_zero_mean, GpObservationSet, KernelSpec};
use bno_core::operator::{gradient, loss, Architecture, NeuralOperatorParams};
use bno_core::pde::{solve_darcy_fd, CoefficientSpec, DarcyProblem, HelmholtzProblem};
use bno_core::{assemble_integral_operator, Field, Grid, Grid1D, Grid2D, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliResult, StageExt};

/// Largest mean and covariance deviation over grids `kx × ky`,
/// `2 ≤ kx, ky ≤ 5`, and `N ∈ {1, 2, 3}` random right-hand sides.
pub fn gp_conditioning(seed: u64) -> CliResult<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = KernelSpec::default();
    let noise = 1e-4;
    let (mut dm, mut dc) = (0.0f64, 0.0f64);
    for kx in 2..=5 {
        for ky in 2..=5 {
            let x = Grid1D::uniform(kx).stage("grid")?;
            let y = Grid1D::uniform(ky).stage("grid")?;
            let rule = QuadratureRule::trapezoid(Grid::One(y.clone())).stage("grid")?;
            for n in 1..=3 {
                let rhs: Vec<Field> = (0..n)
                    .map(|_| Field::new(Grid::One(y.clone()), (0..ky).map(|_| rng.random_range(-1.0..1.0)).collect()))
                    .collect::<bno_core::Result<_>>()
                    .stage("data")?;
                let op = assemble_integral_operator(&rhs, &rule, &x).stage("data")?;
                let targets: Vec<f64> = (0..op.nrows()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = op.matrix().clone();
                let obs = GpObservationSet::new(op, targets.clone(), noise).stage("data")?;
                let g = Grid2D::new(x.clone(), y.clone());
                let post = posterior_zero_mean(&spec, &obs, &g).stage("posterior")?;

                let pts = g.points();
                let k = kernel_matrix(&spec, &pts, &pts).stage("kernel")?;
                let s = &a * &k * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * noise;
                let s_inv = s.try_inverse().expect("noisy Gram matrix is invertible");
                let ka = &k * a.transpose();
                let mean = &ka * &s_inv * DVector::from_column_slice(&targets);
                let cov = &k - &ka * &s_inv * ka.transpose();
                dm = dm.max((DVector::from_column_slice(post.mean()) - mean).amax());
                dc = dc.max((post.covariance() - cov).amax());
            }
        }
    }
    Ok((dm, dc))
}

/// Largest relative error of the gradient against central differences with
/// step `1e-5` over `coords` random coordinates of each architecture.
pub fn gradient_check(coords: usize, seed: u64) -> CliResult<f64> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x = Grid1D::uniform(9).stage("grid")?;
    let rule = QuadratureRule::trapezoid(Grid::One(x)).stage("grid")?;
    let p = HelmholtzProblem::new(4.5).stage("data")?;
    let ds = helmholtz_dataset(&p, &[0, 1, 2], &rule).stage("data")?;
    let shallow = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![8, 8]), seed).stage("init")?;
    worst = worst.max(check(&shallow, ds.samples(), &rule, coords, &mut rng)?);

    let spec = DarcyDataSpec {
        n_samples: 3,
        seed,
        grid_size: 6,
        solve_size: 11,
        coefficient: CoefficientSpec::default(),
    };
    let dd = darcy_dataset(&spec).stage("data")?;
    let rule = QuadratureRule::trapezoid(dd.grid().clone()).stage("grid")?;
    let deep = NeuralOperatorParams::init(Architecture::darcy(vec![6, 6], 3, 2, (3.0, 12.0)), seed).stage("init")?;
    worst = worst.max(check(&deep, dd.samples(), &rule, coords, &mut rng)?);
    Ok(worst)
}

fn check(
    p: &NeuralOperatorParams,
    samples: &[bno_core::dataset::OperatorSample],
    rule: &QuadratureRule,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<f64> {
    let tau = 1e-3;
    let (_, g) = gradient(p, samples, rule, tau).stage("gradient")?;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.random_range(0..p.len());
        let h = 1e-5;
        let mut plus = p.clone();
        plus.values_mut()[i] += h;
        let mut minus = p.clone();
        minus.values_mut()[i] -= h;
        let fd = (loss(&plus, samples, rule, tau).stage("loss")? - loss(&minus, samples, rule, tau).stage("loss")?)
            / (2.0 * h);
        let an = g.values()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Empirical orders of the Darcy solver for `u = sin(πx) sin(πy)`, `λ ≡ 1`
/// on grids of 17, 33 and 65 points per side.
pub fn darcy_orders() -> CliResult<Vec<f64>> {
    let pi = std::f64::consts::PI;
    let mut errs = Vec::new();
    for k in [17, 33, 65] {
        let g = Grid::Two(Grid2D::uniform(k).stage("grid")?);
        let lam = Field::constant(g.clone(), 1.0);
        let f = Field::from_fn(g.clone(), |p| 2.0 * pi * pi * (pi * p[0]).sin() * (pi * p[1]).sin());
        let u = solve_darcy_fd(&DarcyProblem::new(lam, f).stage("solver")?).stage("solver")?;
        let exact = Field::from_fn(g, |p| (pi * p[0]).sin() * (pi * p[1]).sin());
        let e = u
            .values()
            .iter()
            .zip(exact.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        errs.push(e);
    }
    Ok(errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}
