//! Hyperspectral cubes, label maps, patch windows, splits and a synthetic scene generator.

mod cube;
mod split;
mod synth;
mod window;

#[cfg(test)]
mod tests;

use thiserror::Error;

pub use cube::{load_cube, load_labels, save_cube, save_labels, HsiCube, LabelMap, CUBE_MAGIC, LABEL_MAGIC};
pub use split::{make_split, SplitManifest, MIN_CLASS_PIXELS};
pub use synth::{nearest_site, prototype, synth_cube, synth_scene, SynthParams, SynthScene};
pub use window::{extract_window, extract_windows, mirror_index, PatchWindow};

#[derive(Debug, Error)]
pub enum HsiError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("header dimensions overflow the address space")]
    DimensionOverflow,
    #[error("every dimension must be at least 1")]
    ZeroDimension,
    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },
    #[error("class ids must be contiguous from 1; class {missing} is missing")]
    LabelGap { missing: u16 },
    #[error("label map {labels:?} does not match cube {cube:?}")]
    DimensionMismatch {
        cube: (usize, usize),
        labels: (usize, usize),
    },
    #[error("pixel ({row}, {col}) is outside the cube")]
    OutOfBounds { row: usize, col: usize },
    #[error("pixel index {0} is outside the label map")]
    IndexOutOfRange(usize),
    #[error("window size must be even and positive, got {0}")]
    OddWindow(usize),
    #[error("window {size} exceeds cube extent {rows}x{cols}")]
    WindowTooLarge { size: usize, rows: usize, cols: usize },
    #[error("pixel ({row}, {col}) is unlabeled")]
    UnlabeledCenter { row: usize, col: usize },
    #[error("split ratios {0:?} must lie in [0, 1] and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("class {class} has {count} labeled pixels, at least {required} required")]
    ClassTooSmall { class: u16, count: usize, required: usize },
    #[error("index {0} appears in more than one split")]
    ManifestOverlap(usize),
    #[error("manifest does not cover the labeled pixels: {0}")]
    ManifestCoverage(String),
    #[error("invalid synthesis parameters: {0}")]
    InvalidSynth(String),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
