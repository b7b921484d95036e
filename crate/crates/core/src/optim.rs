//! Adaptive optimizer with decoupled weight decay, and the parameter EMA.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Per-parameter first/second moment buffers plus the shared constants.
///
/// Update per step, with bias-corrected moments m^ and v^:
/// ```text
/// theta *= 1 - lr * weight_decay
/// m = beta1 * m + (1 - beta1) * g
/// v = beta2 * v + (1 - beta2) * g^2
/// theta -= lr * m^ / (sqrt(v^) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct Optimizer {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Optimizer {
    pub fn new(params: &ModelParams, cfg: &RunConfig) -> Self {
        let shapes: Vec<usize> = params.params().iter().map(|p| p.numel()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Applies one update from gradients aligned with
    /// [`ModelParams::params`] order.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        let mut tensors = params.params_mut();
        if grads.len() != tensors.len() {
            return Err(Error::Internal(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                tensors.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for ((p, g), (m, v)) in tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.len() != p.value.len() {
                return Err(Error::Internal(format!(
                    "gradient length {} for parameter {} of length {}",
                    g.len(),
                    p.name,
                    p.value.len()
                )));
            }
            for i in 0..p.value.len() {
                p.value[i] *= 1.0 - lr * self.weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of every trainable parameter:
/// `shadow = decay * shadow + (1 - decay) * param` after each step.
#[derive(Debug, Clone)]
pub struct Ema {
    shadow: Vec<Vec<f64>>,
    pub decay: f64,
    pub updates: usize,
}

impl Ema {
    /// Starts the shadow at the current parameter values.
    pub fn new(params: &ModelParams, decay: f64) -> Self {
        Self {
            shadow: params.params().iter().map(|p| p.value.clone()).collect(),
            decay,
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &ModelParams) {
        self.updates += 1;
        for (s, p) in self.shadow.iter_mut().zip(params.params()) {
            for (sv, &pv) in s.iter_mut().zip(&p.value) {
                *sv = self.decay * *sv + (1.0 - self.decay) * pv;
            }
        }
    }

    /// A parameter set carrying the shadow values (the structure is cloned
    /// from `skeleton`).
    pub fn snapshot(&self, skeleton: &ModelParams) -> Result<ModelParams> {
        let mut out = skeleton.clone();
        out.load_values(&self.shadow)?;
        Ok(out)
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }
}
