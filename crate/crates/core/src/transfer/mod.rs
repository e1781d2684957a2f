//! Cross-domain adaptation: kernel two-sample statistics on intermediate
//! features, choosing which encoder layers to freeze, and fine-tuning the rest
//! on a small labeled target sample.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsi::{extract_windows, make_split, HsiCube, HsiError, LabelMap, PatchWindow};
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{FreezeFlags, ModelError, SstModel, TrainConfig, TrainReport};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid MMD configuration: {0}")]
    InvalidConfig(String),
    #[error("MMD needs at least 2 rows per sample (got {x} and {y})")]
    TooFewRows { x: usize, y: usize },
    #[error("feature widths differ: {x} vs {y}")]
    WidthMismatch { x: usize, y: usize },
    #[error("freeze fraction {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("target fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("source has {source_bands} bands, target has {target_bands}")]
    BandMismatch { source_bands: usize, target_bands: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hsi(#[from] HsiError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Rbf,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Within-sample means exclude the diagonal.
    Unbiased,
    /// Plain V-statistic over all pairs.
    Biased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmdConfig {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
    /// Windows drawn per domain when building a freeze plan.
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            kernel: Kernel::Rbf,
            bandwidth: Bandwidth::Median,
            estimator: Estimator::Unbiased,
            sample_count: 256,
            seed: 0,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        if self.sample_count < 2 {
            return Err(TransferError::InvalidConfig("sample_count must be at least 2".into()));
        }
        if let Bandwidth::Fixed(b) = self.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(TransferError::InvalidConfig(format!("bandwidth {b} must be positive")));
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gram matrix of the pooled rows under the configured kernel.
fn pooled_gram(rows: &[&[f64]], cfg: &MmdConfig) -> Vec<f64> {
    let n = rows.len();
    let mut g = vec![0.0; n * n];
    match cfg.kernel {
        Kernel::Linear => {
            for i in 0..n {
                for j in i..n {
                    let v: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                    g[i * n + j] = v;
                    g[j * n + i] = v;
                }
            }
        }
        Kernel::Rbf => {
            let mut d2 = vec![0.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = sq_dist(rows[i], rows[j]);
                    d2[i * n + j] = v;
                    d2[j * n + i] = v;
                }
            }
            let sigma = match cfg.bandwidth {
                Bandwidth::Fixed(b) => b,
                Bandwidth::Median => median_distance(&d2, n),
            };
            let denom = 2.0 * sigma * sigma;
            for (out, v) in g.iter_mut().zip(&d2) {
                *out = (-v / denom).exp();
            }
        }
    }
    g
}

/// Median of the upper-triangle distances; 1 when it is 0.
fn median_distance(d2: &[f64], n: usize) -> f64 {
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[i * n + j].sqrt())
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// MMD² between the index sets `xs` and `ys` of a pooled Gram matrix, clamped at 0.
fn mmd_from_gram(g: &[f64], n: usize, xs: &[usize], ys: &[usize], estimator: Estimator) -> f64 {
    let within = |idx: &[usize]| {
        let mut s = 0.0;
        for &i in idx {
            for &j in idx {
                if i != j || estimator == Estimator::Biased {
                    s += g[i * n + j];
                }
            }
        }
        let m = idx.len() as f64;
        match estimator {
            Estimator::Unbiased => s / (m * (m - 1.0)),
            Estimator::Biased => s / (m * m),
        }
    };
    let mut cross = 0.0;
    for &i in xs {
        for &j in ys {
            cross += g[i * n + j];
        }
    }
    cross /= (xs.len() * ys.len()) as f64;
    (within(xs) + within(ys) - 2.0 * cross).max(0.0)
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize), TransferError> {
    let (nx, dx) = x.dims2().ok_or(TransferError::TooFewRows { x: 0, y: 0 })?;
    let (ny, dy) = y.dims2().ok_or(TransferError::TooFewRows { x: nx, y: 0 })?;
    if nx < 2 || ny < 2 {
        return Err(TransferError::TooFewRows { x: nx, y: ny });
    }
    if dx != dy {
        return Err(TransferError::WidthMismatch { x: dx, y: dy });
    }
    Ok((nx, ny, dx))
}

fn pooled_rows<'a>(x: &'a Tensor, y: &'a Tensor, nx: usize, ny: usize) -> Vec<&'a [f64]> {
    (0..nx).map(|i| x.row(i)).chain((0..ny).map(|i| y.row(i))).collect()
}

/// Squared maximum mean discrepancy between the rows of `x` and `y`.
///
/// With the unbiased estimator the within-sample terms skip the diagonal while
/// the cross term averages over every pair; negative estimates are clamped to 0.
pub fn mmd(x: &Tensor, y: &Tensor, cfg: &MmdConfig) -> Result<f64, TransferError> {
    cfg.validate()?;
    let (nx, ny, _) = check_pair(x, y)?;
    let g = pooled_gram(&pooled_rows(x, y, nx, ny), cfg);
    let xs: Vec<usize> = (0..nx).collect();
    let ys: Vec<usize> = (nx..nx + ny).collect();
    Ok(mmd_from_gram(&g, nx + ny, &xs, &ys, cfg.estimator))
}

/// Statistic values under `iterations` random relabelings of the pooled rows.
/// The kernel (and its bandwidth) is fixed from the pooled sample.
pub fn mmd_permutation_null(
    x: &Tensor,
    y: &Tensor,
    cfg: &MmdConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>, TransferError> {
    cfg.validate()?;
    let (nx, ny, _) = check_pair(x, y)?;
    let n = nx + ny;
    let g = pooled_gram(&pooled_rows(x, y, nx, ny), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    Ok((0..iterations)
        .map(|_| {
            idx.shuffle(&mut rng);
            mmd_from_gram(&g, n, &idx[..nx], &idx[nx..], cfg.estimator)
        })
        .collect())
}

/// Mean over feature columns of the squared half-gap between domain means,
/// i.e. the between-domain variance of each feature's mean.
pub fn cross_domain_variance(x: &Tensor, y: &Tensor) -> Result<f64, TransferError> {
    let (nx, ny, d) = check_pair(x, y)?;
    let mean = |t: &Tensor, n: usize, c: usize| (0..n).map(|i| t.get2(i, c)).sum::<f64>() / n as f64;
    Ok((0..d).map(|c| ((mean(x, nx, c) - mean(y, ny, c)) / 2.0).powi(2)).sum::<f64>() / d as f64)
}

/// Which encoder layers to hold fixed while fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub per_layer_mmd: Vec<f64>,
    pub per_layer_variance: Vec<f64>,
    /// Frozen layer indices, ascending.
    pub frozen: Vec<usize>,
    pub rho: f64,
    /// The patch embedding follows layer 0.
    pub embed_frozen: bool,
}

impl FreezePlan {
    /// Freeze the `⌊rho·L⌋` layers with the lowest scores; ties go to the lower index.
    pub fn from_scores(per_layer_mmd: Vec<f64>, per_layer_variance: Vec<f64>, rho: f64) -> Result<Self, TransferError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(TransferError::InvalidRho(rho));
        }
        let layers = per_layer_mmd.len();
        let count = ((rho * layers as f64) + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..layers).collect();
        order.sort_by(|&a, &b| per_layer_mmd[a].total_cmp(&per_layer_mmd[b]).then(a.cmp(&b)));
        let mut frozen = order[..count.min(layers)].to_vec();
        frozen.sort_unstable();
        Ok(FreezePlan {
            embed_frozen: frozen.first() == Some(&0),
            per_layer_mmd,
            per_layer_variance,
            frozen,
            rho,
        })
    }

    pub fn flags(&self) -> FreezeFlags {
        let mut flags = FreezeFlags::none(self.per_layer_mmd.len());
        for &l in &self.frozen {
            flags.layers[l] = true;
        }
        flags.embed = self.embed_frozen;
        flags
    }
}

fn subsample(windows: &[PatchWindow], count: usize, rng: &mut ChaCha8Rng) -> Vec<PatchWindow> {
    if windows.len() <= count {
        return windows.to_vec();
    }
    let mut idx = sample(rng, windows.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| windows[i].clone()).collect()
}

/// Per-layer MMD between source and target features and the resulting plan.
pub fn freeze_plan(
    model: &SstModel,
    source: &[PatchWindow],
    target: &[PatchWindow],
    rho: f64,
    cfg: &MmdConfig,
) -> Result<FreezePlan, TransferError> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(TransferError::InvalidRho(rho));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src = subsample(source, cfg.sample_count, &mut rng);
    let tgt = subsample(target, cfg.sample_count, &mut rng);
    let mut scores = Vec::with_capacity(model.config().layers);
    let mut variances = Vec::with_capacity(model.config().layers);
    for layer in 0..model.config().layers {
        let fx = model.layer_features(&src, layer)?;
        let fy = model.layer_features(&tgt, layer)?;
        scores.push(mmd(&fx, &fy, cfg)?);
        variances.push(cross_domain_variance(&fx, &fy)?);
    }
    FreezePlan::from_scores(scores, variances, rho)
}

/// Adam fine-tuning with the plan's layers frozen. The model's class count
/// must already match `target_classes` (see [`SstModel::reinit_head`]).
pub fn fine_tune(
    model: &mut SstModel,
    target: &[PatchWindow],
    target_classes: usize,
    plan: &FreezePlan,
    cfg: &TrainConfig,
) -> Result<TrainReport, TransferError> {
    if target_classes != model.config().classes {
        return Err(ModelError::ClassMismatch {
            model: model.config().classes,
            data: target_classes,
        }
        .into());
    }
    model.set_freeze(plan.flags())?;
    Ok(model.train(target, cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl From<&MetricsReport> for Scores {
    fn from(r: &MetricsReport) -> Self {
        Scores {
            oa: r.oa,
            aa: r.aa,
            kappa: r.kappa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source: String,
    pub target: String,
    pub per_layer_mmd: Vec<f64>,
    pub per_layer_variance: Vec<f64>,
    pub frozen: Vec<usize>,
    pub embed_frozen: bool,
    pub zero_shot: Scores,
    pub fine_tuned: Scores,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSetup {
    pub rho: f64,
    /// Share of each target class used for fine-tuning; the rest is the test set.
    pub target_fraction: f64,
    pub mmd: MmdConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

fn evaluate(model: &SstModel, windows: &[PatchWindow]) -> Result<MetricsReport, TransferError> {
    let preds = model.predict(windows)?;
    let truth: Vec<u16> = windows.iter().map(|w| w.label).collect();
    Ok(MetricsReport::from_predictions(&preds, &truth, model.config().classes)?)
}

/// Zero-shot evaluation, freeze planning, fine-tuning and re-evaluation of a
/// source-trained model on a labeled target scene.
///
/// The target's labeled pixels are split per class into a fine-tuning share of
/// `target_fraction` and a test share. If the class counts differ the output
/// layer is re-initialized first, in which case the zero-shot scores come from
/// that untrained layer.
pub fn run_transfer(
    source_model: &SstModel,
    source_windows: &[PatchWindow],
    target_cube: &HsiCube,
    target_labels: &LabelMap,
    setup: &TransferSetup,
) -> Result<(SstModel, TransferReport), TransferError> {
    let f = setup.target_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(TransferError::InvalidFraction(f));
    }
    if target_cube.bands() != source_model.config().bands {
        return Err(TransferError::BandMismatch {
            source_bands: source_model.config().bands,
            target_bands: target_cube.bands(),
        });
    }
    let split = make_split(target_labels, [f, 0.0, 1.0 - f], setup.seed)?;
    let window = source_model.config().window;
    let tune = extract_windows(target_cube, target_labels, &split.train, window)?;
    let test = extract_windows(target_cube, target_labels, &split.test, window)?;

    let mut model = source_model.clone();
    if target_labels.classes() != model.config().classes {
        model.reinit_head(target_labels.classes(), setup.seed)?;
    }
    let zero_shot = evaluate(&model, &test)?;
    let plan = freeze_plan(&model, source_windows, &tune, setup.rho, &setup.mmd)?;
    let losses = fine_tune(&mut model, &tune, target_labels.classes(), &plan, &setup.train)?;
    let tuned = evaluate(&model, &test)?;
    let report = TransferReport {
        source: String::new(),
        target: String::new(),
        per_layer_mmd: plan.per_layer_mmd,
        per_layer_variance: plan.per_layer_variance,
        frozen: plan.frozen,
        embed_frozen: plan.embed_frozen,
        zero_shot: (&zero_shot).into(),
        fine_tuned: (&tuned).into(),
        epoch_losses: losses.epoch_losses,
    };
    Ok((model, report))
}
