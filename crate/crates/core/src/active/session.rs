use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{al_round, query, ActiveError, QueryConfig};
use crate::hsi::{extract_windows, HsiCube, LabelMap, SplitManifest};
use crate::metrics::MetricsReport;
use crate::model::{mix, SstConfig, SstModel, TrainConfig};

/// Everything an active-learning run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlSetup {
    pub model: SstConfig,
    pub train: TrainConfig,
    pub query: QueryConfig,
    pub rounds: usize,
    /// Seeds model initialization and random queries.
    pub seed: u64,
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: String,
    pub train_size: usize,
    pub queried_indices: Vec<usize>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub wall_seconds: f64,
}

impl RoundRecord {
    /// Append as one JSON line.
    pub fn append_to(&self, path: impl AsRef<Path>) -> Result<(), ActiveError> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_string(self)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        Ok(())
    }
}

pub fn read_round_log(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>, ActiveError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub struct AlOutcome {
    pub model: SstModel,
    pub train: Vec<usize>,
    pub pool: Vec<usize>,
    /// Round 0 is the model trained on the initial set; rounds `1..=rounds` follow each query.
    pub records: Vec<RoundRecord>,
    pub report: MetricsReport,
}

fn fit(
    cube: &HsiCube,
    labels: &LabelMap,
    train: &[usize],
    test_windows: &[crate::hsi::PatchWindow],
    setup: &AlSetup,
) -> Result<(SstModel, MetricsReport), ActiveError> {
    let mut model = SstModel::new(setup.model.clone(), setup.seed)?;
    let windows = extract_windows(cube, labels, train, setup.model.window)?;
    model.train(&windows, &setup.train)?;
    let preds = model.predict(test_windows)?;
    let truth: Vec<u16> = test_windows.iter().map(|w| w.label).collect();
    let report = MetricsReport::from_predictions(&preds, &truth, setup.model.classes)?;
    Ok((model, report))
}

/// Train on the manifest's training split, then alternate query → enlarge →
/// retrain for `setup.rounds` rounds, evaluating on the test split each time.
/// Each round's model is trained from the same initialization on the current
/// training set. `on_round` sees every record as soon as it exists.
pub fn run_active_learning(
    cube: &HsiCube,
    labels: &LabelMap,
    manifest: &SplitManifest,
    setup: &AlSetup,
    mut on_round: impl FnMut(&RoundRecord) -> Result<(), ActiveError>,
) -> Result<AlOutcome, ActiveError> {
    setup.query.validate()?;
    let test_windows = extract_windows(cube, labels, &manifest.test, setup.model.window)?;
    let mut train = manifest.train.clone();
    let mut pool = manifest.pool.clone();
    let mut records = Vec::with_capacity(setup.rounds + 1);

    let start = Instant::now();
    let (mut model, mut report) = fit(cube, labels, &train, &test_windows, setup)?;
    let mut push = |round: usize, queried: Vec<usize>, train_size: usize, report: &MetricsReport, started: Instant| {
        let record = RoundRecord {
            round,
            strategy: setup.query.strategy.name().to_string(),
            train_size,
            queried_indices: queried,
            oa: report.oa,
            aa: report.aa,
            kappa: report.kappa,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_round(&record)?;
        records.push(record);
        Ok::<(), ActiveError>(())
    };
    push(0, Vec::new(), train.len(), &report, start)?;

    for round in 1..=setup.rounds {
        let started = Instant::now();
        let queried = if pool.is_empty() {
            Vec::new()
        } else {
            query(&model, cube, labels, &pool, &setup.query, mix(setup.seed, round as u64))?.selected
        };
        let (t, p) = al_round(&train, &pool, &queried)?;
        train = t;
        pool = p;
        let (m, r) = fit(cube, labels, &train, &test_windows, setup)?;
        model = m;
        report = r;
        push(round, queried, train.len(), &report, started)?;
    }
    Ok(AlOutcome {
        model,
        train,
        pool,
        records,
        report,
    })
}
