//! The spatial-spectral transformer: patch embedding, sinusoidal positions,
//! calibrated multi-head encoder blocks, class-token pooling and an MLP head.

mod checkpoint;
mod config;
mod graph;
mod ops;
mod train;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsi::PatchWindow;
use crate::numerics::{NodeId, NumericsError, Tape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::SstConfig;
pub use graph::Mode;
pub(crate) use graph::mix;
pub use ops::{attention, calibrated_attention, embed_patches, positional_encoding, token_uncertainty};
pub use train::{TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("subpatch {subpatch} does not divide window {window}")]
    SubpatchDoesNotDivide { window: usize, subpatch: usize },
    #[error("window is {got:?} (size, bands) but the model expects {expected:?}")]
    WindowMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("label {label} outside the model's {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },
    #[error("data has {data} classes but the model head has {model}")]
    ClassMismatch { model: usize, data: usize },
    #[error("attention row {row} sums to {sum}, not 1")]
    NotDistribution { row: usize, sum: f64 },
    #[error("encoder layer {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("training diverged (non-finite loss or parameters) at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embed,
    Encoder(usize),
    /// Class token, its projections and the MLP head.
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Freeze flags for the embedding, each encoder layer, and the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub embed: bool,
    pub layers: Vec<bool>,
    pub head: bool,
}

impl FreezeFlags {
    pub fn none(layers: usize) -> Self {
        FreezeFlags {
            embed: false,
            layers: vec![false; layers],
            head: false,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embed => self.embed,
            ParamGroup::Encoder(l) => self.layers.get(l).copied().unwrap_or(false),
            ParamGroup::Head => self.head,
        }
    }
}

pub(crate) const PER_LAYER: usize = 12;

// Offsets inside one encoder layer's parameter block.
pub(crate) const W_Q: usize = 0;
pub(crate) const W_K: usize = 1;
pub(crate) const W_V: usize = 2;
pub(crate) const W_O: usize = 3;
pub(crate) const W_1: usize = 4;
pub(crate) const B_1: usize = 5;
pub(crate) const W_2: usize = 6;
pub(crate) const B_2: usize = 7;
pub(crate) const LN1_G: usize = 8;
pub(crate) const LN1_B: usize = 9;
pub(crate) const LN2_G: usize = 10;
pub(crate) const LN2_B: usize = 11;

/// Parameter names and shapes in storage order.
pub(crate) fn layout(cfg: &SstConfig) -> Vec<(String, ParamGroup, Vec<usize>)> {
    let d = cfg.d_model;
    let ff = cfg.ff_width();
    let hid = cfg.hidden_width();
    let mut out = vec![("embed.w_e".to_string(), ParamGroup::Embed, vec![cfg.patch_len(), d])];
    for l in 0..cfg.layers {
        let g = ParamGroup::Encoder(l);
        let shapes: [(&str, Vec<usize>); PER_LAYER] = [
            ("w_q", vec![d, d]),
            ("w_k", vec![d, d]),
            ("w_v", vec![d, d]),
            ("w_o", vec![d, d]),
            ("w_1", vec![d, ff]),
            ("b_1", vec![ff]),
            ("w_2", vec![ff, d]),
            ("b_2", vec![d]),
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
        ];
        for (name, shape) in shapes {
            out.push((format!("layer{l}.{name}"), g, shape));
        }
    }
    let head: [(&str, Vec<usize>); 7] = [
        ("pool.q_c", vec![1, d]),
        ("pool.w_kc", vec![d, d]),
        ("pool.w_vc", vec![d, d]),
        ("head.w_3", vec![d, hid]),
        ("head.b_3", vec![hid]),
        ("head.w_4", vec![hid, cfg.classes]),
        ("head.b_4", vec![cfg.classes]),
    ];
    for (name, shape) in head {
        out.push((name.to_string(), ParamGroup::Head, shape));
    }
    out
}

/// Index of the first pooling parameter.
pub(crate) fn pool_base(cfg: &SstConfig) -> usize {
    1 + cfg.layers * PER_LAYER
}

pub(crate) fn layer_base(layer: usize) -> usize {
    1 + layer * PER_LAYER
}

/// Initial value for one parameter: fan-in uniform for matrices, zeros for
/// biases and the class token, ones for layer-norm gains.
fn init_value(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with("gain") {
        return Tensor::filled(shape, 1.0);
    }
    if shape.len() == 1 || name.ends_with("q_c") {
        return Tensor::zeros(shape);
    }
    let bound = (1.0 / shape[0] as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("layout shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SstModel {
    config: SstConfig,
    params: Vec<Parameter>,
    freeze: FreezeFlags,
    positions: Tensor,
}

impl SstModel {
    pub fn new(config: SstConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, group, shape)| Parameter {
                value: init_value(&name, &shape, &mut rng),
                name,
                group,
            })
            .collect();
        SstModel::from_parts(config, params, None)
    }

    /// Every parameter set to zero, gains included.
    pub fn zeroed(config: SstConfig) -> Result<Self, ModelError> {
        let mut model = SstModel::new(config, 0)?;
        for p in &mut model.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(model)
    }

    pub(crate) fn from_parts(
        config: SstConfig,
        params: Vec<Parameter>,
        freeze: Option<FreezeFlags>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(&params)
                .any(|((name, group, shape), p)| *name != p.name || *group != p.group || shape != p.value.shape())
        {
            return Err(ModelError::Checkpoint("parameter layout does not match the configuration".into()));
        }
        let freeze = freeze.unwrap_or_else(|| FreezeFlags::none(config.layers));
        if freeze.layers.len() != config.layers {
            return Err(ModelError::Checkpoint(format!(
                "{} freeze flags for {} layers",
                freeze.layers.len(),
                config.layers
            )));
        }
        let positions = positional_encoding(config.tokens(), config.d_model);
        Ok(SstModel {
            config,
            params,
            freeze,
            positions,
        })
    }

    pub fn config(&self) -> &SstConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&self) -> &FreezeFlags {
        &self.freeze
    }

    pub fn set_freeze(&mut self, flags: FreezeFlags) -> Result<(), ModelError> {
        if flags.layers.len() != self.config.layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} freeze flags for {} layers",
                flags.layers.len(),
                self.config.layers
            )));
        }
        self.freeze = flags;
        Ok(())
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.freeze.is_frozen(self.params[index].group)
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Swap the output layer for a fresh one with `classes` outputs.
    pub fn reinit_head(&mut self, classes: usize, seed: u64) -> Result<(), ModelError> {
        let mut config = self.config.clone();
        config.classes = classes;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hid = config.hidden_width();
        let n = self.params.len();
        self.params[n - 2].value = init_value("head.w_4", &[hid, classes], &mut rng);
        self.params[n - 1].value = Tensor::zeros(&[classes]);
        self.config = config;
        Ok(())
    }

    /// Record every parameter on `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if self.freeze.is_frozen(p.group) {
                    tape.constant(p.value.clone())
                } else {
                    tape.var(p.value.clone())
                }
            })
            .collect()
    }

    pub(crate) fn check_window(&self, w: &PatchWindow) -> Result<(), ModelError> {
        if w.size != self.config.window || w.bands != self.config.bands {
            return Err(ModelError::WindowMismatch {
                expected: (self.config.window, self.config.bands),
                got: (w.size, w.bands),
            });
        }
        Ok(())
    }

    /// Class probabilities for one window.
    pub fn forward(&self, window: &PatchWindow, mode: Mode) -> Result<Vec<f64>, ModelError> {
        let probs = self.predict_proba_mode(std::slice::from_ref(window), mode)?;
        Ok(probs.row(0).to_vec())
    }

    /// Probability rows `[n × C]` in evaluation mode.
    pub fn predict_proba(&self, windows: &[PatchWindow]) -> Result<Tensor, ModelError> {
        self.predict_proba_mode(windows, Mode::Eval)
    }

    fn predict_proba_mode(&self, windows: &[PatchWindow], mode: Mode) -> Result<Tensor, ModelError> {
        const CHUNK: usize = 64;
        let c = self.config.classes;
        let mut out = Vec::with_capacity(windows.len() * c);
        for chunk in windows.chunks(CHUNK) {
            let mut tape = Tape::new();
            let nodes = self.bind_constants(&mut tape);
            let probs = graph::forward_batch(&mut tape, self, &nodes, chunk, mode)?;
            out.extend_from_slice(tape.value(probs).data());
        }
        Ok(Tensor::new(vec![windows.len(), c], out)?)
    }

    fn bind_constants(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Predicted 1-based class ids.
    pub fn predict(&self, windows: &[PatchWindow]) -> Result<Vec<u16>, ModelError> {
        let probs = self.predict_proba(windows)?;
        Ok((0..windows.len()).map(|i| argmax(probs.row(i)) as u16 + 1).collect())
    }

    /// Encoder output of layer `layer` (0-based), averaged over tokens, one row per window.
    pub fn layer_features(&self, windows: &[PatchWindow], layer: usize) -> Result<Tensor, ModelError> {
        if layer >= self.config.layers {
            return Err(ModelError::LayerOutOfRange {
                index: layer,
                layers: self.config.layers,
            });
        }
        let d = self.config.d_model;
        let n = self.config.tokens();
        let mut out = Vec::with_capacity(windows.len() * d);
        for chunk in windows.chunks(64) {
            let mut tape = Tape::new();
            let nodes = self.bind_constants(&mut tape);
            let mut z = graph::embed_batch(&mut tape, self, &nodes, chunk)?;
            for l in 0..=layer {
                z = graph::encoder_block(&mut tape, self, &nodes, l, z, chunk.len(), Mode::Eval)?;
            }
            let zv = tape.value(z);
            for b in 0..chunk.len() {
                let mut mean = vec![0.0; d];
                for t in 0..n {
                    for (m, v) in mean.iter_mut().zip(zv.row(b * n + t)) {
                        *m += v;
                    }
                }
                out.extend(mean.into_iter().map(|m| m / n as f64));
            }
        }
        Ok(Tensor::new(vec![windows.len(), d], out)?)
    }

    /// Mean cross-entropy over `windows` with their labels.
    pub fn loss(&self, windows: &[PatchWindow], mode: Mode) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let nodes = self.bind_constants(&mut tape);
        let loss = graph::loss_node(&mut tape, self, &nodes, windows, mode)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and per-parameter gradients (`None` for frozen parameters).
    pub fn loss_and_grads(&self, windows: &[PatchWindow], mode: Mode) -> Result<(f64, Vec<Option<Tensor>>), ModelError> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape);
        let loss = graph::loss_node(&mut tape, self, &nodes, windows, mode)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let per_param = nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                if self.is_frozen(i) {
                    Ok(None)
                } else {
                    Ok(Some(
                        grads.take(n)?.unwrap_or_else(|| Tensor::zeros(self.params[i].value.shape())),
                    ))
                }
            })
            .collect::<Result<Vec<_>, NumericsError>>()?;
        Ok((value, per_param))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
