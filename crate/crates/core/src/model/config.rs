use serde::{Deserialize, Serialize};

use super::ModelError;

fn default_window() -> usize {
    8
}
fn default_subpatch() -> usize {
    2
}
fn default_d_model() -> usize {
    56
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}
fn default_ln_eps() -> f64 {
    1e-6
}
fn default_lambda() -> f64 {
    0.5
}

/// Upper bound on any single configured extent.
pub const MAX_DIM: usize = 1 << 12;

/// Architecture hyperparameters of the spatial-spectral transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SstConfig {
    /// Spatial window size `W` (even).
    #[serde(default = "default_window")]
    pub window: usize,
    /// Subpatch size `p`; must divide `window`.
    #[serde(default = "default_subpatch")]
    pub subpatch: usize,
    pub bands: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feedforward width; `0` means `4·d_model`.
    #[serde(default)]
    pub d_ff: usize,
    /// Hidden width of the classification MLP; `0` means `d_model`.
    #[serde(default)]
    pub head_hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    pub classes: usize,
    /// Calibration strength λ.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Re-divide calibrated attention rows by their sums.
    #[serde(default)]
    pub renormalize_calibrated: bool,
}

impl SstConfig {
    /// Defaults for a cube with `bands` bands and `classes` classes.
    pub fn new(bands: usize, classes: usize) -> Self {
        SstConfig {
            window: default_window(),
            subpatch: default_subpatch(),
            bands,
            d_model: default_d_model(),
            layers: default_layers(),
            heads: default_heads(),
            d_ff: 0,
            head_hidden: 0,
            dropout: default_dropout(),
            ln_eps: default_ln_eps(),
            classes,
            lambda: default_lambda(),
            renormalize_calibrated: false,
        }
    }

    /// The alternate 54-wide, 6-head layout.
    pub fn width_54(bands: usize, classes: usize) -> Self {
        SstConfig {
            d_model: 54,
            heads: 6,
            ..SstConfig::new(bands, classes)
        }
    }

    pub fn ff_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn hidden_width(&self) -> usize {
        if self.head_hidden == 0 {
            self.d_model
        } else {
            self.head_hidden
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Tokens per window, `(W/p)²`.
    pub fn tokens(&self) -> usize {
        let side = self.window / self.subpatch;
        side * side
    }

    /// Values per flattened subpatch, `p·p·k`.
    pub fn patch_len(&self) -> usize {
        self.subpatch * self.subpatch * self.bands
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        let dims = [
            self.window,
            self.subpatch,
            self.bands,
            self.d_model,
            self.layers,
            self.heads,
            self.d_ff,
            self.head_hidden,
            self.classes,
        ];
        if dims.iter().any(|&v| v > MAX_DIM) {
            return bad(format!("dimensions above {MAX_DIM} are not supported"));
        }
        if self.window == 0 || !self.window.is_multiple_of(2) {
            return bad(format!("window {} must be even and positive", self.window));
        }
        if self.subpatch == 0 || !self.window.is_multiple_of(self.subpatch) {
            return Err(ModelError::SubpatchDoesNotDivide {
                window: self.window,
                subpatch: self.subpatch,
            });
        }
        if self.bands == 0 || self.classes == 0 || self.layers == 0 {
            return bad("bands, classes and layers must be positive".into());
        }
        if self.d_model < 2 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be >= 2 and divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        Ok(())
    }
}
