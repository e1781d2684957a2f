//! Spatial-spectral transformer classification of hyperspectral cubes with
//! uncertainty-diversity active learning and MMD-guided layer freezing for
//! cross-domain transfer.
//!
//! ```
//! use sst_atl::hsi::{extract_windows, make_split, synth_cube, SynthParams};
//! use sst_atl::model::{SstConfig, SstModel, TrainConfig};
//!
//! # fn main() -> Result<(), Box<dyn std::error::Error>> {
//! let (cube, labels) = synth_cube(&SynthParams {
//!     classes: 3, rows: 8, cols: 8, bands: 6,
//!     noise_sigma: 0.1, domain_shift: 0.0, seed: 7,
//! })?;
//! let split = make_split(&labels, [0.5, 0.0, 0.5], 7)?;
//! let cfg = SstConfig { window: 4, d_model: 8, layers: 1, heads: 2, ..SstConfig::new(cube.bands(), labels.classes()) };
//! let train = extract_windows(&cube, &labels, &split.train, cfg.window)?;
//! let mut model = SstModel::new(cfg, 0)?;
//! model.train(&train, &TrainConfig { epochs: 2, ..TrainConfig::default() })?;
//! let predictions = model.predict(&train)?;
//! assert_eq!(predictions.len(), train.len());
//! # Ok(())
//! # }
//! ```

pub mod active;
pub mod hsi;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod transfer;
