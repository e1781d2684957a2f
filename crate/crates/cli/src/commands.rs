use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sst_atl::active::{run_active_learning, AlSetup, Strategy};
use sst_atl::hsi::{
    extract_windows, load_cube, load_labels, make_split, save_cube, save_labels, synth_cube, HsiCube, HsiError, LabelMap,
    PatchWindow, SplitManifest, SynthParams,
};
use sst_atl::metrics::MetricsReport;
use sst_atl::model::{load_checkpoint, save_checkpoint, SstModel};
use sst_atl::transfer::{run_transfer, TransferSetup};

use crate::args::{AblateArgs, AlArgs, EvalArgs, QueryFlags, Shared, SynthArgs, TrainArgs, TransferArgs};
use crate::config::RunConfig;
use crate::error::CliError;

fn resolve(shared: &Shared) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(shared.config.as_deref())?;
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(e) = shared.epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn apply_query(cfg: &mut RunConfig, q: &QueryFlags) {
    if let Some(s) = q.strategy {
        cfg.query.strategy = s;
    }
    if let Some(k) = q.query_size {
        cfg.query.query_size = Some(k);
    }
    if let Some(r) = q.rounds {
        cfg.rounds = r;
    }
    if let Some(b) = q.beta {
        cfg.query.beta = b;
    }
    if let Some(n) = q.neighborhood {
        cfg.query.n_neighborhood = n;
    }
}

fn announce(cfg: &RunConfig) {
    eprintln!("effective configuration:\n{}", cfg.to_json());
}

fn out_dir(shared: &Shared) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&shared.out)?;
    Ok(shared.out.clone())
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn load_scene(cube: &Path, labels: &Path) -> Result<(HsiCube, LabelMap), CliError> {
    let c = load_cube(cube).map_err(|e| CliError::Data(format!("{}: {e}", cube.display())))?;
    let l = load_labels(labels).map_err(|e| CliError::Data(format!("{}: {e}", labels.display())))?;
    if !l.matches(&c) {
        return Err(CliError::Data(format!(
            "labels are {}x{} but the cube is {}x{}",
            l.rows(),
            l.cols(),
            c.rows(),
            c.cols()
        )));
    }
    Ok((c, l))
}

fn shared_scene(shared: &Shared) -> Result<(HsiCube, LabelMap), CliError> {
    load_scene(required(&shared.cube, "--cube")?, required(&shared.labels, "--labels")?)
}

fn manifest_for(shared: &Shared, cfg: &RunConfig, labels: &LabelMap, seed: u64) -> Result<SplitManifest, CliError> {
    let m = match &shared.manifest {
        Some(p) => SplitManifest::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => make_split(labels, cfg.ratios, seed).map_err(|e| match e {
            HsiError::InvalidRatios(_) => CliError::Usage(e.to_string()),
            other => other.into(),
        })?,
    };
    m.validate(labels)?;
    Ok(m)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializes"))?;
    Ok(())
}

fn evaluate(model: &SstModel, windows: &[PatchWindow]) -> Result<MetricsReport, CliError> {
    let preds = model.predict(windows)?;
    let truth: Vec<u16> = windows.iter().map(|w| w.label).collect();
    Ok(MetricsReport::from_predictions(&preds, &truth, model.config().classes)?)
}

fn check_compatible(model: &SstModel, cube: &HsiCube, labels: &LabelMap) -> Result<(), CliError> {
    if model.config().bands != cube.bands() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} bands, cube has {}",
            model.config().bands,
            cube.bands()
        )));
    }
    if labels.classes() > model.config().classes {
        return Err(CliError::Data(format!(
            "labels use {} classes, checkpoint has {}",
            labels.classes(),
            model.config().classes
        )));
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.shared)?;
    announce(&cfg);
    let (rows, cols, bands) = args.size;
    let params = SynthParams {
        classes: args.classes as usize,
        rows,
        cols,
        bands,
        noise_sigma: args.noise,
        domain_shift: args.shift,
        seed: cfg.seed,
    };
    let (cube, labels) = synth_cube(&params).map_err(|e| match e {
        HsiError::InvalidSynth(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    let out = out_dir(&args.shared)?;
    let cube_path = args.shared.cube.clone().unwrap_or_else(|| out.join("cube.hsic"));
    let label_path = args.shared.labels.clone().unwrap_or_else(|| out.join("labels.hsil"));
    save_cube(&cube, &cube_path)?;
    save_labels(&labels, &label_path)?;
    if let Some(p) = &args.shared.manifest {
        make_split(&labels, cfg.ratios, cfg.seed)?.save(p)?;
    }
    println!(
        "cube {}x{}x{} with {} classes -> {}, {}",
        rows,
        cols,
        bands,
        params.classes,
        cube_path.display(),
        label_path.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.shared)?;
    announce(&cfg);
    let (cube, labels) = shared_scene(&args.shared)?;
    let manifest = manifest_for(&args.shared, &cfg, &labels, cfg.seed)?;
    let mut model = SstModel::new(cfg.model.build(cube.bands(), labels.classes()), cfg.seed)?;
    let window = model.config().window;
    let train = extract_windows(&cube, &labels, &manifest.train, window)?;
    let test = extract_windows(&cube, &labels, &manifest.test, window)?;
    let log = model.train(&train, &cfg.train_config())?;
    let report = evaluate(&model, &test)?;
    let out = out_dir(&args.shared)?;
    let ckpt = args.shared.checkpoint.clone().unwrap_or_else(|| out.join("model.sstk"));
    save_checkpoint(&model, &ckpt)?;
    write_json(&out.join("metrics.json"), &report)?;
    if let Some(last) = log.epoch_losses.last() {
        println!("final training loss {last:.6} after {} steps", log.steps);
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.shared)?;
    announce(&cfg);
    let ckpt = required(&args.shared.checkpoint, "--checkpoint")?;
    let model = load_checkpoint(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    let (cube, labels) = shared_scene(&args.shared)?;
    check_compatible(&model, &cube, &labels)?;
    let indices = match &args.shared.manifest {
        Some(_) => manifest_for(&args.shared, &cfg, &labels, cfg.seed)?.test,
        None => labels.labeled_indices(),
    };
    let windows = extract_windows(&cube, &labels, &indices, model.config().window)?;
    let report = evaluate(&model, &windows)?;
    let out = out_dir(&args.shared)?;
    write_json(&out.join("metrics.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn al_setup(cfg: &RunConfig, cube: &HsiCube, labels: &LabelMap, strategy: Strategy, seed: u64) -> Result<AlSetup, CliError> {
    let mut train = cfg.train_config();
    train.seed = seed;
    Ok(AlSetup {
        model: cfg.model.build(cube.bands(), labels.classes()),
        train,
        query: cfg.query.build(strategy)?,
        rounds: cfg.rounds,
        seed,
    })
}

pub fn al(args: AlArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.shared)?;
    apply_query(&mut cfg, &args.query);
    announce(&cfg);
    let (cube, labels) = shared_scene(&args.shared)?;
    let manifest = manifest_for(&args.shared, &cfg, &labels, cfg.seed)?;
    let setup = al_setup(&cfg, &cube, &labels, cfg.query.strategy, cfg.seed)?;
    setup.model.validate()?;
    let out = out_dir(&args.shared)?;
    let log_path = out.join("rounds.ndjson");
    let outcome = run_active_learning(&cube, &labels, &manifest, &setup, |r| {
        println!(
            "round {} train {} OA {:.2} AA {:.2} kappa {:.2} ({:.1}s)",
            r.round,
            r.train_size,
            100.0 * r.oa,
            100.0 * r.aa,
            100.0 * r.kappa,
            r.wall_seconds
        );
        r.append_to(&log_path)
    })?;
    let ckpt = args.shared.checkpoint.clone().unwrap_or_else(|| out.join("model.sstk"));
    save_checkpoint(&outcome.model, &ckpt)?;
    write_json(&out.join("metrics.json"), &outcome.report)?;
    print!("{}", outcome.report.to_table());
    Ok(())
}

/// Up to `count` windows drawn without replacement from the labeled pixels.
fn sampled_windows(cube: &HsiCube, labels: &LabelMap, window: usize, count: usize, seed: u64) -> Result<Vec<PatchWindow>, CliError> {
    let all = labels.labeled_indices();
    let picked: Vec<usize> = if all.len() <= count {
        all
    } else {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), all.len(), count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    };
    Ok(extract_windows(cube, labels, &picked, window)?)
}

/// Explicit labels, else `<cube stem>.hsil`, else `labels.hsil` beside the cube
/// (the layout `synth` writes).
fn target_label_path(cube: &Path, labels: &Option<PathBuf>) -> PathBuf {
    if let Some(path) = labels {
        return path.clone();
    }
    let same_stem = cube.with_extension("hsil");
    let sibling = cube.with_file_name("labels.hsil");
    if !same_stem.exists() && sibling.exists() {
        sibling
    } else {
        same_stem
    }
}

pub fn transfer(args: TransferArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.shared)?;
    if let Some(r) = args.rho {
        cfg.rho = r;
    }
    if let Some(f) = args.target_fraction {
        cfg.target_fraction = f;
    }
    announce(&cfg);
    let model = load_checkpoint(&args.source_ckpt).map_err(|e| CliError::Data(format!("{}: {e}", args.source_ckpt.display())))?;
    let (src_cube, src_labels) = shared_scene(&args.shared)?;
    check_compatible(&model, &src_cube, &src_labels)?;
    let target_labels_path = target_label_path(&args.target_cube, &args.target_labels);
    let (tgt_cube, tgt_labels) = load_scene(&args.target_cube, &target_labels_path)?;
    let source = sampled_windows(&src_cube, &src_labels, model.config().window, cfg.mmd.sample_count, cfg.seed)?;
    let setup = TransferSetup {
        rho: cfg.rho,
        target_fraction: cfg.target_fraction,
        mmd: cfg.mmd.clone(),
        train: cfg.train_config(),
        seed: cfg.seed,
    };
    let (tuned, mut report) = run_transfer(&model, &source, &tgt_cube, &tgt_labels, &setup)?;
    report.source = args.source_ckpt.display().to_string();
    report.target = args.target_cube.display().to_string();
    let out = out_dir(&args.shared)?;
    let ckpt = args.shared.checkpoint.clone().unwrap_or_else(|| out.join("transferred.sstk"));
    save_checkpoint(&tuned, &ckpt)?;
    write_json(&out.join("transfer.json"), &report)?;
    println!("per-layer MMD {:?}, frozen layers {:?}", report.per_layer_mmd, report.frozen);
    println!(
        "zero-shot OA {:.2}  fine-tuned OA {:.2}",
        100.0 * report.zero_shot.oa,
        100.0 * report.fine_tuned.oa
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    strategy: String,
    budget: usize,
    seed: u64,
    oa: f64,
    aa: f64,
    kappa: f64,
}

impl AblationRow {
    fn new(strategy: &str, budget: usize, seed: u64, r: &MetricsReport) -> Self {
        AblationRow {
            strategy: strategy.to_string(),
            budget,
            seed,
            oa: r.oa,
            aa: r.aa,
            kappa: r.kappa,
        }
    }
}

/// Train once on a fixed set and evaluate on the test split.
fn fit_once(cfg: &RunConfig, setup: &AlSetup, cube: &HsiCube, labels: &LabelMap, train: &[usize], test: &[PatchWindow]) -> Result<(SstModel, MetricsReport), CliError> {
    let mut model = SstModel::new(setup.model.clone(), setup.seed)?;
    let windows = extract_windows(cube, labels, train, setup.model.window)?;
    let mut tc = cfg.train_config();
    tc.seed = setup.seed;
    model.train(&windows, &tc)?;
    let report = evaluate(&model, test)?;
    Ok((model, report))
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.shared)?;
    apply_query(&mut cfg, &args.query);
    announce(&cfg);
    let (cube, labels) = shared_scene(&args.shared)?;
    let target = match &args.target_cube {
        Some(p) => Some(load_scene(p, &target_label_path(p, &args.target_labels))?),
        None => None,
    };
    let out = out_dir(&args.shared)?;
    let mut rows = Vec::new();
    for seed in cfg.seed..cfg.seed + args.seeds {
        let manifest = manifest_for(&args.shared, &cfg, &labels, seed)?;
        let test = extract_windows(&cube, &labels, &manifest.test, cfg.model.window)?;
        for strategy in Strategy::ALL {
            let setup = al_setup(&cfg, &cube, &labels, strategy, seed)?;
            let outcome = run_active_learning(&cube, &labels, &manifest, &setup, |_| Ok(()))?;
            rows.push(AblationRow::new(strategy.name(), outcome.train.len(), seed, &outcome.report));
        }

        // Uncertainty prefilter without the diversity stage.
        let mut no_div = al_setup(&cfg, &cube, &labels, Strategy::Hybrid, seed)?;
        no_div.query.n_neighborhood = 1;
        let outcome = run_active_learning(&cube, &labels, &manifest, &no_div, |_| Ok(()))?;
        rows.push(AblationRow::new("no_diversity", outcome.train.len(), seed, &outcome.report));

        // Hybrid querying with attention calibration disabled.
        let mut flat = al_setup(&cfg, &cube, &labels, Strategy::Hybrid, seed)?;
        flat.model.lambda = 0.0;
        let outcome = run_active_learning(&cube, &labels, &manifest, &flat, |_| Ok(()))?;
        rows.push(AblationRow::new("lambda0", outcome.train.len(), seed, &outcome.report));

        // Passive learning: the same label budget drawn at random in one batch.
        let setup = al_setup(&cfg, &cube, &labels, Strategy::Random, seed)?;
        let extra = (0..cfg.rounds).fold((manifest.pool.len(), 0), |(pool, taken), _| {
            let k = setup.query.size_for(pool);
            (pool - k, taken + k)
        });
        let mut pick = sample(&mut ChaCha8Rng::seed_from_u64(seed), manifest.pool.len(), extra.1).into_vec();
        pick.sort_unstable();
        let mut passive: Vec<usize> = manifest.train.clone();
        passive.extend(pick.into_iter().map(|i| manifest.pool[i]));
        let (source_model, report) = fit_once(&cfg, &setup, &cube, &labels, &passive, &test)?;
        rows.push(AblationRow::new("no_al", passive.len(), seed, &report));

        if let Some((tgt_cube, tgt_labels)) = &target {
            let source = sampled_windows(&cube, &labels, cfg.model.window, cfg.mmd.sample_count, seed)?;
            for (name, rho) in [("freezing", cfg.rho), ("no_freezing", 0.0)] {
                let setup = TransferSetup {
                    rho,
                    target_fraction: cfg.target_fraction,
                    mmd: cfg.mmd.clone(),
                    train: cfg.train_config(),
                    seed,
                };
                let (_, report) = run_transfer(&source_model, &source, tgt_cube, tgt_labels, &setup)?;
                let budget = make_split(tgt_labels, [cfg.target_fraction, 0.0, 1.0 - cfg.target_fraction], seed)?.train.len();
                rows.push(AblationRow {
                    strategy: name.to_string(),
                    budget,
                    seed,
                    oa: report.fine_tuned.oa,
                    aa: report.fine_tuned.aa,
                    kappa: report.fine_tuned.kappa,
                });
            }
        }
    }
    let path = out.join("ablation.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    for row in &rows {
        println!(
            "{:<14} budget {:>5} seed {:>3}  OA {:6.2}  AA {:6.2}  kappa {:6.2}",
            row.strategy,
            row.budget,
            row.seed,
            100.0 * row.oa,
            100.0 * row.aa,
            100.0 * row.kappa
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
