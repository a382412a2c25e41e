//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use bno_core::gp::KernelSpec;
use bno_core::laplace::HyperGrid;
use bno_core::operator::{Architecture, Schedule};
use bno_core::pde::CoefficientSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Green's function recovery with a Gaussian-process prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreensGpConfig {
    /// Seed of the posterior function samples.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lambda0: f64,
    /// Nodes of the quadrature grid on which data live.
    pub grid_points: usize,
    /// Legendre degrees `0..n_train` are observed.
    pub n_train: usize,
    /// Training set sizes compared in the shrinkage study.
    pub n_train_sweep: Vec<usize>,
    /// Points per axis of the grid on which `G` is compared.
    pub eval_points: usize,
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    /// When set, the lengthscale is chosen by marginal likelihood.
    #[serde(default)]
    pub lengthscale_candidates: Option<Vec<f64>>,
    pub posterior_samples: usize,
    /// Held-out Legendre degrees used for solution prediction.
    pub test_degrees: Vec<usize>,
}

/// Shallow neural operator `u = ∫ g_θ(·, y) f(y) dy` on Helmholtz data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowNoConfig {
    /// Weight initialization seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lambda0: f64,
    pub grid_points: usize,
    pub train_degrees: Vec<usize>,
    pub test_degrees: Vec<usize>,
    pub kernel_widths: Vec<usize>,
    pub schedule: Schedule,
    /// Points per axis of the dense grid on which `g_θ` is compared to `G`.
    pub eval_points: usize,
}

/// Deep operator `λ ↦ u` on Darcy data with a last-layer Laplace posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarcyConfig {
    /// Seed of the training coefficients and of the weight initialization.
    pub seed: u64,
    /// Seed of the held-out coefficients.
    pub test_seed: u64,
    /// Seed of the observed-node masks.
    #[serde(default)]
    pub mask_seed: u64,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub grid_size: usize,
    pub solve_size: usize,
    pub eval_size: usize,
    pub coefficient: CoefficientSpec,
    /// Observed output nodes per training sample; all nodes when absent.
    #[serde(default)]
    pub mask_points: Option<usize>,
    pub architecture: Architecture,
    pub schedule: Schedule,
    pub laplace: HyperGrid,
    /// Divide targets by their largest magnitude before training.
    #[serde(default = "yes")]
    pub normalize_targets: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    GreensGp(GreensGpConfig),
    ShallowNo(ShallowNoConfig),
    DarcyLow(DarcyConfig),
    DarcyHigh(DarcyConfig),
}

impl ExperimentConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentConfig::GreensGp(_) => "greens-gp",
            ExperimentConfig::ShallowNo(_) => "shallow-no",
            ExperimentConfig::DarcyLow(_) => "darcy-low",
            ExperimentConfig::DarcyHigh(_) => "darcy-high",
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            ExperimentConfig::GreensGp(c) => &c.out_dir,
            ExperimentConfig::ShallowNo(c) => &c.out_dir,
            ExperimentConfig::DarcyLow(c) | ExperimentConfig::DarcyHigh(c) => &c.out_dir,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            ExperimentConfig::GreensGp(c) => c.out_dir = dir,
            ExperimentConfig::ShallowNo(c) => c.out_dir = dir,
            ExperimentConfig::DarcyLow(c) | ExperimentConfig::DarcyHigh(c) => c.out_dir = dir,
        }
    }

    /// Replaces the experiment seed; for neural operators this also seeds
    /// the weight initialization.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::GreensGp(c) => c.seed = seed,
            ExperimentConfig::ShallowNo(c) => {
                c.seed = seed;
                c.schedule.seed = seed;
            }
            ExperimentConfig::DarcyLow(c) | ExperimentConfig::DarcyHigh(c) => {
                c.seed = seed;
                c.schedule.seed = seed;
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        match self {
            ExperimentConfig::GreensGp(c) => {
                if c.grid_points < 2 || c.eval_points < 2 {
                    return bad("grids need at least two points".into());
                }
                if c.n_train == 0 || c.n_train_sweep.iter().any(|&n| n == 0 || n > c.n_train) {
                    return bad("n_train_sweep entries must lie in 1..=n_train".into());
                }
                if !(c.noise_variance >= 0.0) {
                    return bad("noise_variance must be nonnegative".into());
                }
                c.kernel.validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
            ExperimentConfig::ShallowNo(c) => {
                if c.grid_points < 2 || c.eval_points < 2 {
                    return bad("grids need at least two points".into());
                }
                if c.train_degrees.is_empty() {
                    return bad("train_degrees is empty".into());
                }
                if c.seed != c.schedule.seed {
                    return bad("seed and schedule.seed differ".into());
                }
            }
            ExperimentConfig::DarcyLow(c) | ExperimentConfig::DarcyHigh(c) => {
                if c.n_train == 0 || c.n_test == 0 {
                    return bad("n_train and n_test must be positive".into());
                }
                if c.grid_size < 2 || c.eval_size < 2 || c.solve_size < c.grid_size {
                    return bad("grid sizes are inconsistent".into());
                }
                if (c.solve_size - 1) % (c.grid_size - 1) != 0 {
                    return bad("grid_size must subsample solve_size".into());
                }
                if (c.solve_size.max(c.eval_size) - 1) % (c.eval_size - 1) != 0 {
                    return bad("eval_size must subsample solve_size".into());
                }
                if c.seed != c.schedule.seed {
                    return bad("seed and schedule.seed differ".into());
                }
                if !c.architecture.uses_coefficient || !c.architecture.project {
                    return bad("Darcy operators need the coefficient and a projection".into());
                }
                c.architecture.validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// SHA-256 of the configuration with the output directory blanked, so
    /// that identical experiments written to different places share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.set_out_dir(PathBuf::new());
        let bytes = serde_json::to_vec(&c).expect("serializable");
        hex::encode(Sha256::digest(&bytes))
    }
}

const GREENS_GP: &str = include_str!("../configs/greens-gp.json");
const SHALLOW_NO: &str = include_str!("../configs/shallow-no.json");
const DARCY_LOW: &str = include_str!("../configs/darcy-low.json");
const DARCY_HIGH: &str = include_str!("../configs/darcy-high.json");

/// The shipped configuration of each experiment, in report order.
pub fn default_configs() -> Vec<ExperimentConfig> {
    [GREENS_GP, SHALLOW_NO, DARCY_LOW, DARCY_HIGH]
        .iter()
        .map(|t| ExperimentConfig::from_json(t).expect("shipped configs are valid"))
        .collect()
}

/// Experiments run by `reproduce-all`, given as config paths relative to
/// the root file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootConfig {
    pub experiments: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

impl RootConfig {
    pub fn load(path: &Path) -> CliResult<(Self, Vec<ExperimentConfig>)> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let root: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let configs = root
            .experiments
            .iter()
            .map(|p| ExperimentConfig::load(&base.join(p)))
            .collect::<CliResult<Vec<_>>>()?;
        Ok((root, configs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_round_trip() {
        let cfgs = default_configs();
        let tags: Vec<&str> = cfgs.iter().map(ExperimentConfig::tag).collect();
        assert_eq!(tags, ["greens-gp", "shallow-no", "darcy-low", "darcy-high"]);
        for c in &cfgs {
            assert_eq!(&ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let mut a = default_configs().remove(0);
        let h = a.hash();
        a.set_out_dir("elsewhere".into());
        assert_eq!(a.hash(), h);
        a.set_seed(99);
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn malformed_configs_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_json("{}"), Err(CliError::Config(_))));
        let mut c = default_configs().remove(0);
        if let ExperimentConfig::GreensGp(g) = &mut c {
            g.n_train_sweep = vec![0];
        }
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
