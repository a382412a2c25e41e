//! Layered neural operator with a learned integral kernel.
//!
//! Each layer maps channel fields `v_{l-1} ↦ v_l` by
//!
//! ```text
//! v_l(x) = σ( W_l v_{l-1}(x) + Σ_j w_j g_θ(x, y_j, λ(x), λ(y_j)) v_{l-1}(y_j) )
//! ```
//!
//! where `w_j` are quadrature weights and the kernel network `g_θ` is shared
//! by all layers. An affine lift maps the inputs to `c` channels and an
//! affine projection maps `v_L` to the scalar output; the projection is the
//! linear last layer used by [`crate::laplace`].
//!
//! All parameters live in one flat vector. Matrices are stored row-major in
//! the order: kernel-network layers (weights then bias), lift, skip matrices
//! `W_1..W_L`, projection.

mod kernel;
mod network;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use network::forward_batch;
pub use network::{
    evaluate_on_grid, evaluate_on_grid_with_trace, forward, gradient, kernel_on_grid, loss, ForwardTrace,
};
pub use train::{train_map, LossRecord, Schedule, TrainingOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single exponential.
fn tanh_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + tanh_exp(GELU_C * (x + GELU_A * x * x * x))),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Value and derivative together.
    pub fn value_and_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let t = tanh_exp(GELU_C * (x + GELU_A * x * x * x));
                let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                (0.5 * x * (1.0 + t), d)
            }
            other => (other.apply(x), other.derivative(x)),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => self.value_and_derivative(x).1,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub spatial_dim: usize,
    /// The kernel network and the lift see the coefficient field `λ`.
    pub uses_coefficient: bool,
    /// Hidden widths of `g_θ`; its output is scalar.
    pub kernel_widths: Vec<usize>,
    pub kernel_activation: Activation,
    pub channels: usize,
    pub depth: usize,
    pub layer_activation: Activation,
    /// Pointwise linear terms `W_l`.
    pub skip: bool,
    pub lift: bool,
    /// Lift inputs include the node coordinates.
    pub lift_coordinates: bool,
    pub project: bool,
    /// `λ` is fed to the networks as `(λ - shift) / scale`.
    #[serde(default)]
    pub coefficient_shift: f64,
    #[serde(default = "default_scale")]
    pub coefficient_scale: f64,
}

impl Architecture {
    /// `u(x) = Σ_j w_j g_θ(x, y_j) f(y_j)`: one identity layer without
    /// lift, skip or projection.
    pub fn one_layer_linear(spatial_dim: usize, kernel_widths: Vec<usize>) -> Self {
        Self {
            spatial_dim,
            uses_coefficient: false,
            kernel_widths,
            kernel_activation: Activation::Gelu,
            channels: 1,
            depth: 1,
            layer_activation: Activation::Identity,
            skip: false,
            lift: false,
            lift_coordinates: false,
            project: false,
            coefficient_shift: 0.0,
            coefficient_scale: 1.0,
        }
    }

    /// Deep Darcy network mapping `λ ↦ u` for two-level coefficients.
    pub fn darcy(kernel_widths: Vec<usize>, channels: usize, depth: usize, levels: (f64, f64)) -> Self {
        Self {
            spatial_dim: 2,
            uses_coefficient: true,
            kernel_widths,
            kernel_activation: Activation::Gelu,
            channels,
            depth,
            layer_activation: Activation::Relu,
            skip: true,
            lift: true,
            lift_coordinates: true,
            project: true,
            coefficient_shift: 0.5 * (levels.0 + levels.1),
            coefficient_scale: (0.5 * (levels.1 - levels.0)).abs().max(1e-12),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        if !(1..=2).contains(&self.spatial_dim) {
            return bad("spatial_dim must be 1 or 2");
        }
        if self.channels == 0 || self.depth == 0 {
            return bad("channels and depth must be positive");
        }
        if self.kernel_widths.contains(&0) {
            return bad("kernel widths must be positive");
        }
        if (!self.lift || !self.project) && self.channels != 1 {
            return bad("without lift and projection the operator has a single channel");
        }
        if !(self.coefficient_scale > 0.0) {
            return bad("coefficient_scale must be positive");
        }
        Ok(())
    }

    /// `(x, y)` plus `(λ(x), λ(y))` when the coefficient is used.
    pub fn kernel_input_dim(&self) -> usize {
        2 * self.spatial_dim + if self.uses_coefficient { 2 } else { 0 }
    }

    /// `f`, then `λ` and coordinates when enabled.
    pub fn lift_input_dim(&self) -> usize {
        1 + usize::from(self.uses_coefficient) + if self.lift_coordinates { self.spatial_dim } else { 0 }
    }

    /// Length of the last-layer feature vector with the bias folded in.
    pub fn feature_dim(&self) -> usize {
        self.channels + 1
    }

    pub(crate) fn normalize_coefficient(&self, v: f64) -> f64 {
        (v - self.coefficient_shift) / self.coefficient_scale
    }
}

/// Row-major `rows × cols` weights at `w` followed by a bias at `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DenseSlot {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub kernel: Vec<DenseSlot>,
    pub lift: Option<DenseSlot>,
    pub skips: Vec<usize>,
    pub projection: Option<DenseSlot>,
    pub len: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut dense = |rows: usize, cols: usize| {
            let slot = DenseSlot {
                w: off,
                b: off + rows * cols,
                rows,
                cols,
            };
            off += rows * cols + rows;
            slot
        };
        let mut dims = vec![arch.kernel_input_dim()];
        dims.extend(&arch.kernel_widths);
        dims.push(1);
        let kernel = dims.windows(2).map(|w| dense(w[1], w[0])).collect();
        let lift = arch.lift.then(|| dense(arch.channels, arch.lift_input_dim()));
        let c = arch.channels;
        let mut skips = Vec::new();
        if arch.skip {
            for _ in 0..arch.depth {
                skips.push(off);
                off += c * c;
            }
        }
        let projection = if arch.project {
            let slot = DenseSlot {
                w: off,
                b: off + c,
                rows: 1,
                cols: c,
            };
            off += c + 1;
            Some(slot)
        } else {
            None
        };
        Self {
            kernel,
            lift,
            skips,
            projection,
            len: off,
        }
    }
}

/// All trainable parameters `Θ`, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOperatorParams {
    arch: Architecture,
    layout: Layout,
    values: Vec<f64>,
}

impl NeuralOperatorParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let values = vec![0.0; layout.len];
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    /// Zero biases, weights uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |values: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
            for v in values {
                *v = dist.sample(&mut rng);
            }
        };
        let layout = p.layout.clone();
        for s in layout.kernel.iter().chain(&layout.lift).chain(&layout.projection) {
            fill(&mut p.values[s.w..s.b], s.cols, s.rows);
        }
        let c = p.arch.channels;
        for &off in &layout.skips {
            fill(&mut p.values[off..off + c * c], c, c);
        }
        Ok(p)
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::invalid(format!(
                "architecture has {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        p.values = values;
        Ok(p)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Kernel-network weights of layer `k` as a row-major matrix and its bias.
    pub fn kernel_layer(&self, k: usize) -> (&[f64], &[f64]) {
        let s = self.layout.kernel[k];
        (&self.values[s.w..s.b], &self.values[s.b..s.b + s.rows])
    }

    /// Projection weights and bias, the last linear layer.
    pub fn projection(&self) -> Option<(&[f64], f64)> {
        self.layout
            .projection
            .map(|s| (&self.values[s.w..s.b], self.values[s.b]))
    }

    /// Skip matrix `W_l` (row-major, `c × c`) for `l` in `1..=depth`.
    pub fn skip(&self, l: usize) -> Option<&[f64]> {
        let c = self.arch.channels;
        self.layout
            .skips
            .get(l.checked_sub(1)?)
            .map(|&o| &self.values[o..o + c * c])
    }

    pub fn skip_mut(&mut self, l: usize) -> Option<&mut [f64]> {
        let c = self.arch.channels;
        let o = *self.layout.skips.get(l.checked_sub(1)?)?;
        Some(&mut self.values[o..o + c * c])
    }

    /// Writes `model.json` and `params.bin` (little-endian f64) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, metadata: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::json!({
            "architecture": self.arch,
            "n_params": self.values.len(),
            "encoding": "little-endian f64",
            "ordering": "kernel-network layers (weights row-major, bias), lift, skip matrices by layer, projection",
            "metadata": metadata,
        });
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join("params.bin");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, serde_json::Value)> {
        #[derive(Deserialize)]
        struct Manifest {
            architecture: Architecture,
            n_params: usize,
            #[serde(default)]
            metadata: serde_json::Value,
        }
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let path = dir.join("params.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 8 * m.n_params {
            return Err(Error::format(&path, format!("expected {} parameters", m.n_params)));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let p = Self::from_values(m.architecture, values).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok((p, m.metadata))
    }
}
