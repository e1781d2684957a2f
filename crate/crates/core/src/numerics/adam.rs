use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// How the configured `decay` enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `lr_t = lr / (1 + decay·t)`.
    LearningRate,
    /// L2 penalty: `decay·θ` is added to the gradient.
    Weight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 1e-6,
            decay_mode: DecayMode::LearningRate,
        }
    }
}

/// First/second moments for each parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        match self.config.decay_mode {
            DecayMode::LearningRate => self.config.lr / (1.0 + self.config.decay * self.t as f64),
            DecayMode::Weight => self.config.lr,
        }
    }

    /// One bias-corrected Adam update.
    ///
    /// `frozen[i]` parameters, and parameters without a gradient, are left
    /// untouched along with their moments.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
        frozen: &[bool],
    ) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != params.len() || frozen.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} freeze flags, state for {}",
                    params.len(),
                    grads.len(),
                    frozen.len(),
                    self.m.len()
                ),
            });
        }
        let lr = self.current_lr();
        self.t += 1;
        let cfg = &self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if frozen[i] {
                continue;
            }
            if g.len() != param.len() || self.m[i].len() != param.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("parameter {i}: {:?} vs gradient {:?}", param.shape(), g.shape()),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in param.data_mut().iter_mut().enumerate() {
                let mut gj = g.data()[j];
                if cfg.decay_mode == DecayMode::Weight {
                    gj += cfg.decay * *theta;
                }
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
