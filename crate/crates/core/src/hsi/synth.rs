use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HsiCube, HsiError, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub noise_sigma: f64,
    pub domain_shift: f64,
    pub seed: u64,
}

/// Generated cube, its labels, and the Voronoi sites (site `c` owns class `c + 1`).
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    pub sites: Vec<(usize, usize)>,
}

/// Prototype spectrum of 0-based class `class`: one sine period across the
/// bands, phase `2π·class/classes + shift`, unit amplitude.
pub fn prototype(class: usize, classes: usize, bands: usize, shift: f64) -> Vec<f64> {
    let phase = TAU * class as f64 / classes as f64 + shift;
    (0..bands)
        .map(|b| (TAU * b as f64 / bands as f64 + phase).sin())
        .collect()
}

/// Index of the site nearest to `(row, col)`; ties go to the lower index.
pub fn nearest_site(sites: &[(usize, usize)], row: usize, col: usize) -> usize {
    let mut best = (usize::MAX, 0);
    for (i, &(sr, sc)) in sites.iter().enumerate() {
        let d = sr.abs_diff(row).pow(2) + sc.abs_diff(col).pow(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn synth_scene(p: &SynthParams) -> Result<SynthScene, HsiError> {
    if p.classes < 2 || p.bands < p.classes || p.rows == 0 || p.cols == 0 {
        return Err(HsiError::InvalidSynth(format!(
            "need classes >= 2, bands >= classes and nonzero extent (got C={}, {}x{}x{})",
            p.classes, p.rows, p.cols, p.bands
        )));
    }
    let pixels = p.rows.checked_mul(p.cols).ok_or(HsiError::DimensionOverflow)?;
    if p.classes > pixels {
        return Err(HsiError::InvalidSynth(format!(
            "{} classes cannot fit in {} pixels",
            p.classes, pixels
        )));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) || !p.domain_shift.is_finite() {
        return Err(HsiError::InvalidSynth("noise_sigma must be finite and >= 0".into()));
    }
    if p.classes > u16::MAX as usize {
        return Err(HsiError::InvalidSynth("too many classes for 16-bit labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    // Sites on distinct pixels so every cell owns at least its own site pixel.
    let sites: Vec<(usize, usize)> = sample(&mut rng, pixels, p.classes)
        .into_iter()
        .map(|i| (i / p.cols, i % p.cols))
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..p.classes)
        .map(|c| prototype(c, p.classes, p.bands, p.domain_shift))
        .collect();
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut labels = Vec::with_capacity(pixels);
    let mut data = Vec::with_capacity(pixels * p.bands);
    for r in 0..p.rows {
        for c in 0..p.cols {
            let class = nearest_site(&sites, r, c);
            labels.push(class as u16 + 1);
            for &v in &prototypes[class] {
                let n = if p.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((v + n) as f32);
            }
        }
    }
    Ok(SynthScene {
        cube: HsiCube::new(p.rows, p.cols, p.bands, data)?,
        labels: LabelMap::new(p.rows, p.cols, labels)?,
        sites,
    })
}

pub fn synth_cube(p: &SynthParams) -> Result<(HsiCube, LabelMap), HsiError> {
    synth_scene(p).map(|s| (s.cube, s.labels))
}
