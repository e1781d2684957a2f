use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hsi::PatchWindow;
use crate::numerics::{AdamConfig, AdamState, Tensor};

use super::graph::{mix, Mode};
use super::{ModelError, SstModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 56,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl SstModel {
    /// Minibatch Adam on the labeled `windows`. Frozen parameters are not touched.
    pub fn train(&mut self, windows: &[PatchWindow], cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
        let mut state = AdamState::new(cfg.adam.clone(), self.params().iter().map(|p| &p.value));
        self.train_with_state(windows, cfg, &mut state)
    }

    pub fn train_with_state(
        &mut self,
        windows: &[PatchWindow],
        cfg: &TrainConfig,
        state: &mut AdamState,
    ) -> Result<TrainReport, ModelError> {
        let mut report = TrainReport::default();
        if windows.is_empty() || cfg.epochs == 0 {
            return Ok(report);
        }
        super::graph::targets(self, windows)?;
        for w in windows {
            self.check_window(w)?;
        }
        let batch_size = cfg.batch_size.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let frozen: Vec<bool> = (0..self.params().len()).map(|i| self.is_frozen(i)).collect();
        let mut step = 0u64;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<PatchWindow> = chunk.iter().map(|&i| windows[i].clone()).collect();
                let mode = Mode::Train {
                    seed: mix(cfg.seed, step),
                };
                let (loss, grads) = self.loss_and_grads(&batch, mode)?;
                if !loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch });
                }
                total += loss * batch.len() as f64;
                let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
                let mut params: Vec<&mut Tensor> = self.params_mut().iter_mut().map(|p| &mut p.value).collect();
                state.step(&mut params, &grad_refs, &frozen)?;
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(ModelError::NonFiniteLoss { epoch });
                }
                step += 1;
            }
            report.epoch_losses.push(total / windows.len() as f64);
        }
        report.steps = step;
        Ok(report)
    }
}
