use serde::{Deserialize, Serialize};

use crate::dataset::OperatorSample;
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;

use super::network::gradient;
use super::NeuralOperatorParams;

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_decay_factor() -> f64 {
    1.0
}

fn default_log_every() -> usize {
    50
}

/// Full-batch Adam on the regularized loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Prior precision `τ` of the weight-decay term.
    pub prior_precision: f64,
    /// Seed of the weight initialization.
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// The step size is multiplied by `decay_factor` every `decay_every`
    /// iterations.
    #[serde(default)]
    pub decay_every: Option<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Schedule {
    pub fn adam(iterations: usize, learning_rate: f64, prior_precision: f64, seed: u64) -> Self {
        Self {
            iterations,
            learning_rate,
            prior_precision,
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            decay_every: None,
            decay_factor: 1.0,
            log_every: default_log_every(),
        }
    }

    fn step_size(&self, t: usize) -> f64 {
        match self.decay_every {
            Some(k) if k > 0 => self.learning_rate * self.decay_factor.powi((t / k) as i32),
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters with the lowest loss seen.
    pub params: NeuralOperatorParams,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub log: Vec<LossRecord>,
}

/// Minimizes the regularized loss from `init`. The loss at iteration `t` is
/// that of the parameters before the `t`-th update; the final parameters
/// are scored too.
pub fn train_map(
    init: &NeuralOperatorParams,
    samples: &[OperatorSample],
    rule: &QuadratureRule,
    schedule: &Schedule,
) -> Result<TrainingOutcome> {
    if !(schedule.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let tau = schedule.prior_precision;
    let mut params = init.clone();
    let mut best = params.clone();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let (mut b1t, mut b2t) = (1.0, 1.0);
    let mut log = Vec::new();
    let mut initial = f64::NAN;
    let mut best_loss = f64::INFINITY;

    for t in 0..=schedule.iterations {
        let (value, grad) = gradient(&params, samples, rule, tau)?;
        if t == 0 {
            initial = value;
        }
        if !value.is_finite() || value > 1e6 * initial {
            return Err(Error::Divergence {
                iteration: t,
                loss: value,
                initial,
            });
        }
        if value < best_loss {
            best_loss = value;
            best.values_mut().copy_from_slice(params.values());
        }
        if t % schedule.log_every.max(1) == 0 || t == schedule.iterations {
            log.push(LossRecord { iteration: t, loss: value });
        }
        if t == schedule.iterations {
            break;
        }
        b1t *= schedule.beta1;
        b2t *= schedule.beta2;
        let lr = schedule.step_size(t);
        for (((p, g), mi), vi) in params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = schedule.beta1 * *mi + (1.0 - schedule.beta1) * g;
            *vi = schedule.beta2 * *vi + (1.0 - schedule.beta2) * g * g;
            let mhat = *mi / (1.0 - b1t);
            let vhat = *vi / (1.0 - b2t);
            *p -= lr * mhat / (vhat.sqrt() + schedule.epsilon);
        }
    }
    Ok(TrainingOutcome {
        params: best,
        initial_loss: initial,
        best_loss,
        log,
    })
}
