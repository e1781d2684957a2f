use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sst_atl::active::{QueryConfig, Strategy};
use sst_atl::model::{SstConfig, TrainConfig};
use sst_atl::numerics::{AdamConfig, DecayMode};
use sst_atl::transfer::MmdConfig;

use crate::error::CliError;

/// Architecture settings; band and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub window: usize,
    pub subpatch: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub lambda: f64,
    pub renormalize_calibrated: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = SstConfig::new(1, 1);
        ModelSection {
            window: d.window,
            subpatch: d.subpatch,
            d_model: d.d_model,
            layers: d.layers,
            heads: d.heads,
            d_ff: d.d_ff,
            head_hidden: d.head_hidden,
            dropout: d.dropout,
            ln_eps: d.ln_eps,
            lambda: d.lambda,
            renormalize_calibrated: d.renormalize_calibrated,
        }
    }
}

impl ModelSection {
    pub fn build(&self, bands: usize, classes: usize) -> SstConfig {
        SstConfig {
            window: self.window,
            subpatch: self.subpatch,
            bands,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
            classes,
            lambda: self.lambda,
            renormalize_calibrated: self.renormalize_calibrated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySection {
    pub strategy: Strategy,
    /// Required for `al` and `ablate`; there is no sensible default.
    pub query_size: Option<usize>,
    pub query_fraction: Option<f64>,
    pub n_neighborhood: usize,
    pub beta: usize,
}

impl Default for QuerySection {
    fn default() -> Self {
        QuerySection {
            strategy: Strategy::Hybrid,
            query_size: None,
            query_fraction: None,
            n_neighborhood: 3,
            beta: 5,
        }
    }
}

impl QuerySection {
    pub fn build(&self, strategy: Strategy) -> Result<QueryConfig, CliError> {
        let query_size = match (self.query_size, self.query_fraction) {
            (Some(q), _) => q,
            (None, Some(_)) => 1,
            (None, None) => return Err(CliError::Usage("--query-size (or query.query_size in --config) is required".into())),
        };
        let cfg = QueryConfig {
            query_size,
            query_fraction: self.query_fraction,
            n_neighborhood: self.n_neighborhood,
            beta: self.beta,
            strategy,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Every tunable of a run. Loaded from `--config` JSON (missing keys take the
/// defaults below), then overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub query: QuerySection,
    pub mmd: MmdConfig,
    /// Train / pool / test shares of each class.
    pub ratios: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
    pub rounds: usize,
    pub seed: u64,
    pub rho: f64,
    pub target_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunConfig {
            model: ModelSection::default(),
            query: QuerySection::default(),
            mmd: MmdConfig::default(),
            ratios: [0.01, 0.49, 0.50],
            epochs: 50,
            batch_size: 56,
            lr: adam.lr,
            decay: adam.decay,
            decay_mode: adam.decay_mode,
            rounds: 6,
            seed: 0,
            rho: 0.5,
            target_fraction: 0.10,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                decay: self.decay,
                decay_mode: self.decay_mode,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
