//! The `generate`, `fit` and `evaluate` stages of each experiment.
//!
//! Every experiment writes below its `out_dir`:
//! `dataset/` (training data), `model/` (fitted artifacts and training log)
//! and `eval/` (`metrics.json` and figure data under `figures/`).

use std::fs;
use std::path::{Path, PathBuf};

use bno_core::dataset::{darcy_dataset, helmholtz_dataset, DarcyDataSpec, OperatorDataset, OperatorSample};
use bno_core::diagnostics::{
    error_std_rank_correlation, export_figure_data, interval_coverage, median, relative_l2, worst_region_std,
    PredictionRecord,
};
use bno_core::gp::{
    log_marginal_likelihood, posterior_zero_mean, predict_solution, sample_posterior, select_lengthscale,
    GpObservationSet, KernelSpec,
};
use bno_core::laplace::{
    extract_features, map_weights, observed_targets, tune_hyperparameters, LaplacePosterior, LastLayerFeatures,
};
use bno_core::operator::{
    evaluate_on_grid, forward, kernel_on_grid, train_map, Architecture, NeuralOperatorParams, TrainingOutcome,
};
use bno_core::pde::{legendre_rhs, solve_helmholtz, HelmholtzProblem};
use bno_core::table::write_csv;
use bno_core::{Field, Grid, Grid1D, Grid2D, QuadratureRule};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DarcyConfig, ExperimentConfig, GreensGpConfig, ShallowNoConfig};
use crate::error::{CliError, CliResult, StageExt};

pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("dataset")
}

pub fn model_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("model")
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("eval")
}

/// Per-input prediction quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub relative_l2: f64,
    /// Rank correlation of |error| and std; absent when std is constant or
    /// the grid has fewer than ten points.
    pub spearman: Option<f64>,
    pub coverage_1_96: f64,
    pub mean_std: f64,
}

impl SampleMetrics {
    fn of(r: &PredictionRecord) -> CliResult<Self> {
        let std = r.std.values();
        Ok(Self {
            id: r.id.clone(),
            relative_l2: r.relative_l2().stage("metrics")?,
            spearman: if std.len() >= 10 {
                error_std_rank_correlation(r).stage("metrics")?
            } else {
                None
            },
            coverage_1_96: interval_coverage(r, 1.96).stage("metrics")?,
            mean_std: std.iter().sum::<f64>() / std.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageRow {
    pub n_train: usize,
    /// Root mean square error of the posterior mean of `G`.
    pub rmse: f64,
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreensGpMetrics {
    pub config_hash: String,
    pub lengthscales: [f64; 2],
    pub log_marginal_likelihood: f64,
    pub shrinkage: Vec<ShrinkageRow>,
    /// Relative L2 error of the predicted solution for each training input.
    pub training_relative_l2: Vec<f64>,
    pub test: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowNoMetrics {
    pub config_hash: String,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Relative L2 error of `g_θ` against the Green's function.
    pub greens_relative_l2: f64,
    pub train: Vec<SampleMetrics>,
    pub test: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceChecks {
    /// The predictive mean equals the network output bit for bit.
    pub mean_is_map_bitwise: bool,
    /// Largest `|var − σ²| / σ²` under prior precision `1e12`.
    pub strong_prior_max_rel_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarcyMetrics {
    pub config_hash: String,
    pub u_scale: f64,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub tau: f64,
    pub sigma2: f64,
    pub log_marginal_likelihood: f64,
    pub test: Vec<SampleMetrics>,
    pub median_relative_l2: f64,
    pub median_spearman: Option<f64>,
    pub mean_std: f64,
    /// Median std over the 10% of test grid points with the largest error,
    /// pooled over test inputs, and the median std over all of them.
    pub worst_decile_median_std: f64,
    pub overall_median_std: f64,
    /// Median std on the first training input and on a checkerboard
    /// coefficient unlike any training field, both on the training grid.
    pub training_input_median_std: f64,
    pub novel_input_median_std: f64,
    pub laplace: LaplaceChecks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Metrics {
    GreensGp(GreensGpMetrics),
    ShallowNo(ShallowNoMetrics),
    DarcyLow(DarcyMetrics),
    DarcyHigh(DarcyMetrics),
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn read_json<T: for<'a> Deserialize<'a>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|_| CliError::NotFound(path.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage {
        stage: "load".into(),
        source: bno_core::Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Stage {
        stage: "write".into(),
        source: bno_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> CliResult<OperatorDataset> {
    let dir = dataset_dir(cfg);
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::NotFound(dir));
    }
    OperatorDataset::load(&dir).stage("load dataset")
}

fn require_model(cfg: &ExperimentConfig, file: &str) -> CliResult<PathBuf> {
    let dir = model_dir(cfg);
    if !dir.join(file).is_file() {
        return Err(CliError::NotFound(dir.join(file)));
    }
    Ok(dir)
}

fn helmholtz_rule(points: usize) -> CliResult<QuadratureRule> {
    let grid = Grid1D::uniform(points).stage("grid")?;
    QuadratureRule::trapezoid(Grid::One(grid)).stage("grid")
}

fn rule_grid(rule: &QuadratureRule) -> Grid1D {
    rule.nodes().as_1d().expect("1D rule").clone()
}

/// Writes the training set.
pub fn generate(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let ds = match cfg {
        ExperimentConfig::GreensGp(c) => {
            let p = HelmholtzProblem::new(c.lambda0).stage("generate")?;
            let degrees: Vec<usize> = (0..c.n_train).collect();
            helmholtz_dataset(&p, &degrees, &helmholtz_rule(c.grid_points)?).stage("generate")?
        }
        ExperimentConfig::ShallowNo(c) => {
            let p = HelmholtzProblem::new(c.lambda0).stage("generate")?;
            helmholtz_dataset(&p, &c.train_degrees, &helmholtz_rule(c.grid_points)?).stage("generate")?
        }
        ExperimentConfig::DarcyLow(c) | ExperimentConfig::DarcyHigh(c) => {
            let ds = darcy_dataset(&darcy_spec(c)).stage("generate")?;
            match c.mask_points {
                Some(k) => ds.with_random_masks(k, c.mask_seed).stage("generate")?,
                None => ds,
            }
        }
    };
    let dir = dataset_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    }
    ds.save(&dir).stage("generate")?;
    Ok(dir)
}

fn darcy_spec(c: &DarcyConfig) -> DarcyDataSpec {
    DarcyDataSpec {
        n_samples: c.n_train,
        seed: c.seed,
        grid_size: c.grid_size,
        solve_size: c.solve_size,
        coefficient: c.coefficient.clone(),
    }
}

/// Fits the experiment's model to the stored training set.
pub fn fit(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let ds = load_dataset(cfg)?;
    let dir = model_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    match cfg {
        ExperimentConfig::GreensGp(c) => fit_gp(c, cfg, &ds, &dir)?,
        ExperimentConfig::ShallowNo(c) => fit_shallow(c, cfg, &ds, &dir)?,
        ExperimentConfig::DarcyLow(c) | ExperimentConfig::DarcyHigh(c) => fit_darcy(c, cfg, &ds, &dir)?,
    }
    Ok(dir)
}

/// Predicts on held-out inputs, writes `metrics.json` and figure data.
pub fn evaluate(cfg: &ExperimentConfig) -> CliResult<Metrics> {
    let ds = load_dataset(cfg)?;
    let dir = eval_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    }
    let metrics = match cfg {
        ExperimentConfig::GreensGp(c) => Metrics::GreensGp(evaluate_gp(c, cfg, &ds, &dir)?),
        ExperimentConfig::ShallowNo(c) => Metrics::ShallowNo(evaluate_shallow(c, cfg, &ds, &dir)?),
        ExperimentConfig::DarcyLow(c) => Metrics::DarcyLow(evaluate_darcy(c, cfg, &ds, &dir)?),
        ExperimentConfig::DarcyHigh(c) => Metrics::DarcyHigh(evaluate_darcy(c, cfg, &ds, &dir)?),
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// `generate`, `fit` and `evaluate` in sequence.
pub fn run(cfg: &ExperimentConfig) -> CliResult<Metrics> {
    generate(cfg)?;
    fit(cfg)?;
    evaluate(cfg)
}

// ---------------------------------------------------------------- greens-gp

#[derive(Debug, Serialize, Deserialize)]
struct GpModel {
    config_hash: String,
    kernel: KernelSpec,
    noise_variance: f64,
    n_train: usize,
    log_marginal_likelihood: f64,
}

fn gp_observations(ds: &OperatorDataset, n: usize, rule: &QuadratureRule, noise: f64) -> CliResult<GpObservationSet> {
    let s = &ds.samples()[..n];
    let f: Vec<Field> = s.iter().map(|s| s.forcing.clone()).collect();
    let u: Vec<Field> = s.iter().map(|s| s.solution.clone()).collect();
    GpObservationSet::from_pairs(&f, &u, rule, noise).stage("observations")
}

fn greens_truth(p: &HelmholtzProblem, g: &Grid2D) -> Field {
    let values = p.greens_matrix(&g.x_grid, &g.y_grid);
    Field::new(Grid::Two(g.clone()), values)
        .expect("finite Green's function")
        .with_name("greens_function")
}

fn gp_panel(
    c: &GreensGpConfig,
    kernel: &KernelSpec,
    obs: &GpObservationSet,
    id: &str,
) -> CliResult<PredictionRecord> {
    let eval = Grid2D::uniform(c.eval_points).stage("grid")?;
    let post = posterior_zero_mean(kernel, obs, &eval).stage("posterior")?;
    let p = HelmholtzProblem::new(c.lambda0).stage("posterior")?;
    let grid = Grid::Two(eval.clone());
    let std = Field::new(grid, post.std()).stage("posterior")?;
    PredictionRecord::new(id, greens_truth(&p, &eval), post.mean_field(), std)
        .stage("posterior")?
        .with_samples(sample_posterior(&post, c.posterior_samples, c.seed))
        .stage("posterior")
}

fn fit_gp(c: &GreensGpConfig, cfg: &ExperimentConfig, ds: &OperatorDataset, dir: &Path) -> CliResult<()> {
    let rule = helmholtz_rule(c.grid_points)?;
    let obs = gp_observations(ds, c.n_train, &rule, c.noise_variance)?;
    let (kernel, lml) = match &c.lengthscale_candidates {
        Some(cands) => select_lengthscale(&c.kernel, &obs, cands).stage("lengthscale selection")?,
        None => (c.kernel.clone(), log_marginal_likelihood(&c.kernel, &obs).stage("evidence")?),
    };
    let panel = gp_panel(c, &kernel, &obs, "greens_posterior")?;
    export_figure_data(&[panel], dir, &cfg.hash()).stage("export")?;
    write_json(
        &dir.join("gp.json"),
        &GpModel {
            config_hash: cfg.hash(),
            kernel,
            noise_variance: c.noise_variance,
            n_train: c.n_train,
            log_marginal_likelihood: lml,
        },
    )
}

fn evaluate_gp(c: &GreensGpConfig, cfg: &ExperimentConfig, ds: &OperatorDataset, dir: &Path) -> CliResult<GreensGpMetrics> {
    let model: GpModel = read_json(&require_model(cfg, "gp.json")?.join("gp.json"))?;
    let rule = helmholtz_rule(c.grid_points)?;
    let p = HelmholtzProblem::new(c.lambda0).stage("evaluate")?;

    let mut shrinkage = Vec::new();
    for &n in &c.n_train_sweep {
        let obs = gp_observations(ds, n, &rule, model.noise_variance)?;
        let eval = Grid2D::uniform(c.eval_points).stage("grid")?;
        let post = posterior_zero_mean(&model.kernel, &obs, &eval).stage("posterior")?;
        let truth = greens_truth(&p, &eval);
        let sq: f64 = post.mean().iter().zip(truth.values()).map(|(a, b)| (a - b).powi(2)).sum();
        let std = post.std();
        shrinkage.push(ShrinkageRow {
            n_train: n,
            rmse: (sq / truth.len() as f64).sqrt(),
            mean_std: std.iter().sum::<f64>() / std.len() as f64,
        });
    }

    let obs = gp_observations(ds, model.n_train, &rule, model.noise_variance)?;
    let x = rule_grid(&rule);
    let post = posterior_zero_mean(&model.kernel, &obs, &Grid2D::new(x.clone(), x.clone())).stage("posterior")?;
    let mut training_relative_l2 = Vec::new();
    for s in &ds.samples()[..model.n_train] {
        let pred = predict_solution(&post, &s.forcing, &rule, &x).stage("prediction")?;
        training_relative_l2.push(relative_l2(&pred.mean, &s.solution).stage("metrics")?);
    }

    let mut records = vec![gp_panel(c, &model.kernel, &obs, "greens_posterior")?];
    let mut test = Vec::new();
    for &d in &c.test_degrees {
        let f = legendre_rhs(d, &x);
        let u = solve_helmholtz(&p, &f, &rule).stage("evaluate")?;
        let pred = predict_solution(&post, &f, &rule, &x).stage("prediction")?;
        let r = PredictionRecord::new(format!("legendre_{d}"), u, pred.mean, pred.std).stage("metrics")?;
        test.push(SampleMetrics::of(&r)?);
        records.push(r);
    }
    export_figure_data(&records, &dir.join("figures"), &cfg.hash()).stage("export")?;
    Ok(GreensGpMetrics {
        config_hash: cfg.hash(),
        lengthscales: model.kernel.lengthscales,
        log_marginal_likelihood: model.log_marginal_likelihood,
        shrinkage,
        training_relative_l2,
        test,
    })
}

// --------------------------------------------------------------- shallow-no

fn write_log(dir: &Path, out: &TrainingOutcome) -> CliResult<()> {
    let it: Vec<f64> = out.log.iter().map(|r| r.iteration as f64).collect();
    let loss: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    write_csv(&dir.join("training_log.csv"), &["iteration".into(), "loss".into()], &[it, loss]).stage("write log")
}

fn fit_shallow(c: &ShallowNoConfig, cfg: &ExperimentConfig, ds: &OperatorDataset, dir: &Path) -> CliResult<()> {
    let rule = helmholtz_rule(c.grid_points)?;
    let arch = Architecture::one_layer_linear(1, c.kernel_widths.clone());
    let init = NeuralOperatorParams::init(arch, c.schedule.seed).stage("initialization")?;
    let out = train_map(&init, ds.samples(), &rule, &c.schedule).stage("training")?;
    write_log(dir, &out)?;
    let meta = json!({
        "experiment": cfg.tag(),
        "config_hash": cfg.hash(),
        "schedule": c.schedule,
        "initial_loss": out.initial_loss,
        "best_loss": out.best_loss,
    });
    out.params.save_checkpoint(dir, &meta).stage("checkpoint")
}

fn no_uncertainty(truth: &Field) -> Field {
    Field::zeros(truth.grid().clone()).with_name("std")
}

fn evaluate_shallow(
    c: &ShallowNoConfig,
    cfg: &ExperimentConfig,
    ds: &OperatorDataset,
    dir: &Path,
) -> CliResult<ShallowNoMetrics> {
    let (params, meta) = NeuralOperatorParams::load_checkpoint(&require_model(cfg, "model.json")?).stage("load model")?;
    let rule = helmholtz_rule(c.grid_points)?;
    let p = HelmholtzProblem::new(c.lambda0).stage("evaluate")?;

    let dense = Grid1D::uniform(c.eval_points).stage("grid")?;
    let g2 = Grid2D::new(dense.clone(), dense.clone());
    let learned = kernel_on_grid(&params, &Grid::One(dense.clone()), &Grid::One(dense)).stage("kernel")?;
    let learned = Field::new(Grid::Two(g2.clone()), learned).stage("kernel")?;
    let truth = greens_truth(&p, &g2);
    let greens_relative_l2 = relative_l2(&learned, &truth).stage("metrics")?;
    let mut records = vec![PredictionRecord::new("learned_kernel", truth.clone(), learned, no_uncertainty(&truth))
        .stage("metrics")?];

    let mut train = Vec::new();
    for s in ds.samples() {
        let (u, _) = forward(&params, None, &s.forcing, &rule).stage("forward")?;
        let r = PredictionRecord::new(s.id.clone(), s.solution.clone(), u, no_uncertainty(&s.solution)).stage("metrics")?;
        train.push(SampleMetrics::of(&r)?);
    }
    let x = rule_grid(&rule);
    let mut test = Vec::new();
    for &d in &c.test_degrees {
        let f = legendre_rhs(d, &x);
        let u = solve_helmholtz(&p, &f, &rule).stage("evaluate")?;
        let (pred, _) = forward(&params, None, &f, &rule).stage("forward")?;
        let r = PredictionRecord::new(format!("legendre_{d}"), u.clone(), pred, no_uncertainty(&u)).stage("metrics")?;
        test.push(SampleMetrics::of(&r)?);
        records.push(r);
    }
    export_figure_data(&records, &dir.join("figures"), &cfg.hash()).stage("export")?;
    Ok(ShallowNoMetrics {
        config_hash: cfg.hash(),
        initial_loss: meta["initial_loss"].as_f64().unwrap_or(f64::NAN),
        best_loss: meta["best_loss"].as_f64().unwrap_or(f64::NAN),
        greens_relative_l2,
        train,
        test,
    })
}

// -------------------------------------------------------------------- darcy

/// Largest observed target magnitude; 1 when targets are not normalized.
fn target_scale(c: &DarcyConfig, samples: &[OperatorSample]) -> f64 {
    if !c.normalize_targets {
        return 1.0;
    }
    let m = observed_targets(samples).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn scaled(samples: &[OperatorSample], scale: f64) -> Vec<OperatorSample> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.solution = s.solution.map(|v| v / scale);
            s
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DarcyFit {
    config_hash: String,
    u_scale: f64,
    initial_loss: f64,
    best_loss: f64,
    tau: f64,
    sigma2: f64,
    log_marginal_likelihood: f64,
}

fn fit_darcy(c: &DarcyConfig, cfg: &ExperimentConfig, ds: &OperatorDataset, dir: &Path) -> CliResult<()> {
    let rule = QuadratureRule::trapezoid(ds.grid().clone()).stage("grid")?;
    let u_scale = target_scale(c, ds.samples());
    let samples = scaled(ds.samples(), u_scale);
    let init = NeuralOperatorParams::init(c.architecture.clone(), c.schedule.seed).stage("initialization")?;
    let out = train_map(&init, &samples, &rule, &c.schedule).stage("training")?;
    write_log(dir, &out)?;
    let meta = json!({
        "experiment": cfg.tag(),
        "config_hash": cfg.hash(),
        "schedule": c.schedule,
        "u_scale": u_scale,
        "initial_loss": out.initial_loss,
        "best_loss": out.best_loss,
    });
    out.params.save_checkpoint(dir, &meta).stage("checkpoint")?;

    let features = extract_features(&out.params, &samples, &rule).stage("laplace features")?;
    let targets = observed_targets(&samples);
    let h = tune_hyperparameters(&features, &targets, &c.laplace).stage("laplace tuning")?;
    let w = map_weights(&out.params).stage("laplace")?;
    let post = LaplacePosterior::fit(&features, &targets, &w, h.tau, h.sigma2).stage("laplace fit")?;
    post.save(dir).stage("laplace artifact")?;
    write_json(
        &dir.join("fit.json"),
        &DarcyFit {
            config_hash: cfg.hash(),
            u_scale,
            initial_loss: out.initial_loss,
            best_loss: out.best_loss,
            tau: h.tau,
            sigma2: h.sigma2,
            log_marginal_likelihood: h.log_marginal_likelihood,
        },
    )
}

/// Alternating 2×2-node blocks of the two coefficient levels.
fn checkerboard(grid: &Grid2D, c: &DarcyConfig) -> Field {
    let (_, ny) = grid.shape();
    let values = (0..grid.len())
        .map(|i| {
            let (ix, iy) = (i / ny, i % ny);
            if (ix / 2 + iy / 2) % 2 == 0 {
                c.coefficient.low
            } else {
                c.coefficient.high
            }
        })
        .collect();
    Field::new(Grid::Two(grid.clone()), values).expect("finite levels")
}

fn evaluate_darcy(c: &DarcyConfig, cfg: &ExperimentConfig, ds: &OperatorDataset, dir: &Path) -> CliResult<DarcyMetrics> {
    let mdir = require_model(cfg, "fit.json")?;
    let fitted: DarcyFit = read_json(&mdir.join("fit.json"))?;
    let (params, _) = NeuralOperatorParams::load_checkpoint(&mdir).stage("load model")?;
    let post = LaplacePosterior::load(&mdir).stage("load laplace")?;
    let scale = fitted.u_scale;

    let test_spec = DarcyDataSpec {
        n_samples: c.n_test,
        seed: c.test_seed,
        grid_size: c.eval_size,
        solve_size: c.solve_size.max(c.eval_size),
        coefficient: c.coefficient.clone(),
    };
    let tests = darcy_dataset(&test_spec).stage("test data")?;
    let fine = QuadratureRule::trapezoid(tests.grid().clone()).stage("grid")?;

    let mut records = Vec::new();
    let mut mean_is_map_bitwise = true;
    for (k, s) in tests.samples().iter().enumerate() {
        let pred = post
            .predict(&params, s.coefficient.as_ref(), &s.forcing, &fine, false)
            .stage("prediction")?;
        if k == 0 {
            let map = evaluate_on_grid(&params, s.coefficient.as_ref(), &s.forcing, &fine).stage("prediction")?;
            mean_is_map_bitwise = map
                .values()
                .iter()
                .zip(pred.mean.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
        let mean = pred.mean.map(|v| v * scale).with_name("mean");
        let std = pred.std.map(|v| v * scale).with_name("std");
        records.push(PredictionRecord::new(s.id.clone(), s.solution.clone(), mean, std).stage("metrics")?);
    }
    let test: Vec<SampleMetrics> = records.iter().map(SampleMetrics::of).collect::<CliResult<_>>()?;

    let mut err = Vec::new();
    let mut std = Vec::new();
    for r in &records {
        err.extend(r.abs_error());
        std.extend_from_slice(r.std.values());
    }
    let pooled = PredictionRecord::new(
        "pooled",
        Field::zeros(Grid::One(Grid1D::uniform(err.len()).stage("grid")?)),
        Field::new(Grid::One(Grid1D::uniform(err.len()).stage("grid")?), err).stage("metrics")?,
        Field::new(Grid::One(Grid1D::uniform(std.len()).stage("grid")?), std.clone()).stage("metrics")?,
    )
    .stage("metrics")?;
    let (worst, overall) = worst_region_std(&pooled, 0.1).stage("metrics")?;

    let rule = QuadratureRule::trapezoid(ds.grid().clone()).stage("grid")?;
    let first = &ds.samples()[0];
    let on_train = post
        .predict(&params, first.coefficient.as_ref(), &first.forcing, &rule, false)
        .stage("prediction")?;
    let grid16 = ds.grid().as_2d().expect("2D dataset");
    let novel = post
        .predict(&params, Some(&checkerboard(grid16, c)), &first.forcing, &rule, false)
        .stage("prediction")?;

    let samples = scaled(ds.samples(), scale);
    let features = extract_features(&params, &samples, &rule).stage("laplace features")?;
    let targets = observed_targets(&samples);
    let strong = LaplacePosterior::fit(&features, &targets, post.map_weights(), 1e12, post.sigma2()).stage("laplace")?;
    let probe = LastLayerFeatures::new(features.matrix().clone()).stage("laplace")?;
    let (_, var, _) = strong.predict_features(&probe, false).stage("laplace")?;
    let s2 = post.sigma2();
    let dev = var.iter().map(|v| (v - s2).abs() / s2).fold(0.0, f64::max);

    export_figure_data(&records, &dir.join("figures"), &cfg.hash()).stage("export")?;
    let spearmans: Vec<f64> = test.iter().filter_map(|m| m.spearman).collect();
    Ok(DarcyMetrics {
        config_hash: cfg.hash(),
        u_scale: scale,
        initial_loss: fitted.initial_loss,
        best_loss: fitted.best_loss,
        tau: post.tau(),
        sigma2: post.sigma2(),
        log_marginal_likelihood: post.log_marginal_likelihood(),
        median_relative_l2: median(&test.iter().map(|m| m.relative_l2).collect::<Vec<_>>()).unwrap_or(f64::NAN),
        median_spearman: median(&spearmans),
        mean_std: std.iter().sum::<f64>() / std.len() as f64,
        worst_decile_median_std: worst,
        overall_median_std: overall,
        training_input_median_std: median(on_train.std.values()).unwrap_or(f64::NAN) * scale,
        novel_input_median_std: median(novel.std.values()).unwrap_or(f64::NAN) * scale,
        laplace: LaplaceChecks {
            mean_is_map_bitwise,
            strong_prior_max_rel_deviation: dev,
        },
        test,
    })
}
