use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HsiError, LabelMap};

/// Smallest class size `make_split` accepts.
pub const MIN_CLASS_PIXELS: usize = 3;

/// Disjoint train/pool/test pixel indices (`row·cols + col`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<usize>,
    pub pool: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn from_json(text: &str) -> Result<Self, HsiError> {
        let manifest: SplitManifest = serde_json::from_str(text)?;
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HsiError> {
        SplitManifest::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HsiError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    fn check_disjoint(&self) -> Result<(), HsiError> {
        let mut seen = HashSet::with_capacity(self.train.len() + self.pool.len() + self.test.len());
        for &i in self.train.iter().chain(&self.pool).chain(&self.test) {
            if !seen.insert(i) {
                return Err(HsiError::ManifestOverlap(i));
            }
        }
        Ok(())
    }

    /// Checks the manifest partitions exactly the labeled pixels of `labels`
    /// and that every class has a training sample.
    pub fn validate(&self, labels: &LabelMap) -> Result<(), HsiError> {
        self.check_disjoint()?;
        let all: HashSet<usize> = self.train.iter().chain(&self.pool).chain(&self.test).copied().collect();
        let n = labels.labels().len();
        if let Some(&bad) = all.iter().find(|&&i| i >= n || labels.at_index(i) == 0) {
            return Err(HsiError::ManifestCoverage(format!("index {bad} is not a labeled pixel")));
        }
        let labeled = labels.labeled_indices();
        if labeled.len() != all.len() {
            return Err(HsiError::ManifestCoverage(format!(
                "{} labeled pixels but {} indices in the manifest",
                labeled.len(),
                all.len()
            )));
        }
        let mut has_train = vec![false; labels.classes() + 1];
        for &i in &self.train {
            has_train[labels.at_index(i) as usize] = true;
        }
        if let Some(c) = (1..=labels.classes()).find(|&c| !has_train[c]) {
            return Err(HsiError::ManifestCoverage(format!("class {c} has no training sample")));
        }
        Ok(())
    }
}

/// Per-class stratified split at `ratios = (train, pool, test)`.
///
/// Train and pool counts are rounded to nearest and the remainder goes to test.
/// A class whose rounded train count is zero borrows one sample from its pool
/// (or test) share.
pub fn make_split(labels: &LabelMap, ratios: [f64; 3], seed: u64) -> Result<SplitManifest, HsiError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HsiError::InvalidRatios(ratios));
    }
    let mut by_class = vec![Vec::new(); labels.classes() + 1];
    for i in labels.labeled_indices() {
        by_class[labels.at_index(i) as usize].push(i);
    }
    for (c, members) in by_class.iter().enumerate().skip(1) {
        if members.len() < MIN_CLASS_PIXELS {
            return Err(HsiError::ClassTooSmall {
                class: c as u16,
                count: members.len(),
                required: MIN_CLASS_PIXELS,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut pool, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for members in by_class.iter_mut().skip(1) {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = ((ratios[0] * n as f64).round() as usize).min(n);
        let mut n_pool = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        if n_train == 0 {
            n_train = 1;
            n_pool = n_pool.saturating_sub(1);
        }
        train.extend_from_slice(&members[..n_train]);
        pool.extend_from_slice(&members[n_train..n_train + n_pool]);
        test.extend_from_slice(&members[n_train + n_pool..]);
    }
    train.sort_unstable();
    pool.sort_unstable();
    test.sort_unstable();
    Ok(SplitManifest {
        seed,
        ratios,
        train,
        pool,
        test,
    })
}
