//! Pool-based query selection: uncertainty, entropy and margin scores,
//! neighborhood spectral diversity, the hybrid prefilter-then-diversify rule,
//! and train/pool bookkeeping.

mod session;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsi::{extract_windows, mirror_index, HsiCube, HsiError, LabelMap};
use crate::metrics::MetricsError;
use crate::model::{ModelError, SstModel};
use crate::numerics::Tensor;

pub use session::{read_round_log, run_active_learning, AlOutcome, AlSetup, RoundRecord};

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("invalid query configuration: {0}")]
    InvalidConfig(String),
    #[error("no samples to score")]
    Empty,
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotDistribution { row: usize, sum: f64 },
    #[error("margin needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("neighborhood size {0} must be odd and positive")]
    EvenNeighborhood(usize),
    #[error("pixel ({row}, {col}) outside the cube")]
    OutOfBounds { row: usize, col: usize },
    #[error("queried index {0} is not in the pool")]
    NotInPool(usize),
    #[error("index {0} queried twice")]
    Duplicate(usize),
    #[error(transparent)]
    Hsi(#[from] HsiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("round log: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hybrid,
    Random,
    Entropy,
    Margin,
    DiversityOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Hybrid,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::DiversityOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Hybrid => "hybrid",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::DiversityOnly => "diversity_only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ActiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s || (s == "diversity-only" && *st == Strategy::DiversityOnly))
            .ok_or_else(|| ActiveError::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

fn default_neighborhood() -> usize {
    3
}
fn default_beta() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    /// Samples added per round.
    pub query_size: usize,
    /// When set, the per-round size is `max(1, round(fraction·|pool|))` instead.
    #[serde(default)]
    pub query_fraction: Option<f64>,
    /// Side of the odd square neighborhood used for diversity.
    #[serde(default = "default_neighborhood")]
    pub n_neighborhood: usize,
    /// Uncertainty prefilter keeps `beta·query_size` candidates.
    #[serde(default = "default_beta")]
    pub beta: usize,
    pub strategy: Strategy,
}

impl QueryConfig {
    pub fn new(query_size: usize, strategy: Strategy) -> Self {
        QueryConfig {
            query_size,
            query_fraction: None,
            n_neighborhood: default_neighborhood(),
            beta: default_beta(),
            strategy,
        }
    }

    pub fn validate(&self) -> Result<(), ActiveError> {
        let bad = |m: &str| Err(ActiveError::InvalidConfig(m.into()));
        if self.query_size == 0 {
            return bad("query_size must be at least 1");
        }
        if self.n_neighborhood == 0 || self.n_neighborhood.is_multiple_of(2) {
            return Err(ActiveError::EvenNeighborhood(self.n_neighborhood));
        }
        if self.beta == 0 {
            return bad("beta must be at least 1");
        }
        if let Some(f) = self.query_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("query_fraction must lie in (0, 1]");
            }
        }
        Ok(())
    }

    /// Number of samples to select from a pool of `pool` candidates.
    pub fn size_for(&self, pool: usize) -> usize {
        let k = match self.query_fraction {
            Some(f) => ((f * pool as f64).round() as usize).max(1),
            None => self.query_size,
        };
        k.min(pool)
    }
}

/// Selected pool pixel indices with their scores, in selection order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub selected: Vec<usize>,
    pub uncertainty: Vec<f64>,
    pub diversity: Vec<f64>,
}

fn check_rows(probs: &Tensor) -> Result<(usize, usize), ActiveError> {
    let (n, c) = probs.dims2().ok_or(ActiveError::Empty)?;
    if n == 0 || c == 0 {
        return Err(ActiveError::Empty);
    }
    for row in 0..n {
        let sum: f64 = probs.row(row).iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.row(row).iter().any(|p| !(*p >= 0.0)) {
            return Err(ActiveError::NotDistribution { row, sum });
        }
    }
    Ok((n, c))
}

/// Negated top probability per row; larger means less confident.
pub fn uncertainty_scores(probs: &Tensor) -> Result<Vec<f64>, ActiveError> {
    let (n, _) = check_rows(probs)?;
    Ok((0..n)
        .map(|i| -probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Shannon entropy (natural log) per row.
pub fn entropy_scores(probs: &Tensor) -> Result<Vec<f64>, ActiveError> {
    let (n, _) = check_rows(probs)?;
    Ok((0..n)
        .map(|i| -probs.row(i).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .collect())
}

/// Negated gap between the two largest probabilities per row.
pub fn margin_scores(probs: &Tensor) -> Result<Vec<f64>, ActiveError> {
    let (n, c) = check_rows(probs)?;
    if c < 2 {
        return Err(ActiveError::TooFewClasses(c));
    }
    Ok((0..n)
        .map(|i| {
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in probs.row(i) {
                if p > a {
                    b = a;
                    a = p;
                } else if p > b {
                    b = p;
                }
            }
            -(a - b)
        })
        .collect())
}

/// Mean pairwise Euclidean distance among the `n²` spectra of the `n × n`
/// neighborhood centered on `pixel`, mirrored at the cube edges. Zero for `n = 1`.
pub fn neighborhood_diversity(cube: &HsiCube, pixel: (usize, usize), n: usize) -> Result<f64, ActiveError> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(ActiveError::EvenNeighborhood(n));
    }
    let (r, c) = pixel;
    if r >= cube.rows() || c >= cube.cols() {
        return Err(ActiveError::OutOfBounds { row: r, col: c });
    }
    if n == 1 {
        return Ok(0.0);
    }
    let half = (n / 2) as isize;
    let mut spectra: Vec<&[f32]> = Vec::with_capacity(n * n);
    for dr in -half..=half {
        let row = mirror_index(r as isize + dr, cube.rows());
        for dc in -half..=half {
            spectra.push(cube.spectrum(row, mirror_index(c as isize + dc, cube.cols())));
        }
    }
    let m = spectra.len();
    let mut total = 0.0;
    for j in 0..m {
        for k in j + 1..m {
            let sq: f64 = spectra[j]
                .iter()
                .zip(spectra[k])
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(2.0 * total / (m * (m - 1)) as f64)
}

/// Positions of the `k` highest scores, best first; equal scores keep their
/// original order.
pub fn select_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

/// Hybrid ranking over positions `0..uncertainty.len()`: keep the
/// `beta·k` most uncertain, then take the `k` most diverse of those. Diversity
/// ties fall back to uncertainty rank. `diversity` is evaluated only on the
/// kept candidates.
pub fn rank_hybrid(
    uncertainty: &[f64],
    k: usize,
    beta: usize,
    mut diversity: impl FnMut(usize) -> Result<f64, ActiveError>,
) -> Result<Vec<usize>, ActiveError> {
    let keep = k.saturating_mul(beta).min(uncertainty.len());
    let candidates = select_top(uncertainty, keep);
    let scores = candidates.iter().map(|&i| diversity(i)).collect::<Result<Vec<_>, _>>()?;
    Ok(select_top(&scores, k).into_iter().map(|j| candidates[j]).collect())
}

/// Select the next batch from `pool` (pixel indices into `labels`).
///
/// `model` supplies class probabilities for the score-based strategies; random
/// selection draws from a ChaCha8 stream seeded with `seed`.
pub fn query(
    model: &SstModel,
    cube: &HsiCube,
    labels: &LabelMap,
    pool: &[usize],
    cfg: &QueryConfig,
    seed: u64,
) -> Result<QueryResult, ActiveError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(ActiveError::Empty);
    }
    let k = cfg.size_for(pool.len());
    let n = cfg.n_neighborhood;
    let coords = |pos: usize| labels.coords(pool[pos]);
    let diversity_at = |pos: usize| neighborhood_diversity(cube, coords(pos), n);
    let window = model.config().window;
    let pool_probs = || -> Result<Tensor, ActiveError> {
        let windows = extract_windows(cube, labels, pool, window)?;
        Ok(model.predict_proba(&windows)?)
    };

    let (positions, uncertainty_all) = match cfg.strategy {
        Strategy::Random => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order.truncate(k);
            (order, None)
        }
        Strategy::DiversityOnly => {
            let d = (0..pool.len()).map(diversity_at).collect::<Result<Vec<_>, _>>()?;
            (select_top(&d, k), None)
        }
        Strategy::Entropy => {
            let probs = pool_probs()?;
            (select_top(&entropy_scores(&probs)?, k), Some(uncertainty_scores(&probs)?))
        }
        Strategy::Margin => {
            let probs = pool_probs()?;
            (select_top(&margin_scores(&probs)?, k), Some(uncertainty_scores(&probs)?))
        }
        Strategy::Hybrid => {
            let u = uncertainty_scores(&pool_probs()?)?;
            (rank_hybrid(&u, k, cfg.beta, diversity_at)?, Some(u))
        }
    };

    let selected: Vec<usize> = positions.iter().map(|&p| pool[p]).collect();
    let uncertainty = match uncertainty_all {
        Some(u) => positions.iter().map(|&p| u[p]).collect(),
        None if selected.is_empty() => Vec::new(),
        None => {
            let windows = extract_windows(cube, labels, &selected, window)?;
            uncertainty_scores(&model.predict_proba(&windows)?)?
        }
    };
    let diversity = positions.iter().map(|&p| diversity_at(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(QueryResult {
        selected,
        uncertainty,
        diversity,
    })
}

/// Move `queried` from the pool into the training set. Both outputs are sorted.
pub fn al_round(train: &[usize], pool: &[usize], queried: &[usize]) -> Result<(Vec<usize>, Vec<usize>), ActiveError> {
    let pool_set: HashSet<usize> = pool.iter().copied().collect();
    let mut taken = HashSet::with_capacity(queried.len());
    for &q in queried {
        if !pool_set.contains(&q) {
            return Err(ActiveError::NotInPool(q));
        }
        if !taken.insert(q) {
            return Err(ActiveError::Duplicate(q));
        }
    }
    let mut new_train: Vec<usize> = train.iter().chain(queried).copied().collect();
    new_train.sort_unstable();
    let new_pool: Vec<usize> = pool.iter().copied().filter(|i| !taken.contains(i)).collect();
    Ok((new_train, new_pool))
}
