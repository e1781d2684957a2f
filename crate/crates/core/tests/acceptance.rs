//! End-to-end acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one `PASS`/`FAIL` line; the process exits non-zero
//! if any criterion fails.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sst_atl::active::{al_round, neighborhood_diversity, run_active_learning, AlSetup, QueryConfig, Strategy};
use sst_atl::hsi::{
    extract_windows, load_cube, load_labels, make_split, save_cube, save_labels, synth_cube, HsiCube, LabelMap,
    PatchWindow, SplitManifest, SynthParams,
};
use sst_atl::metrics::{aa, kappa, oa, ConfusionMatrix, MetricsReport};
use sst_atl::model::{
    attention, calibrated_attention, load_checkpoint, save_checkpoint, Mode, ParamGroup, SstConfig, SstModel,
    TrainConfig,
};
use sst_atl::numerics::{AdamConfig, NodeId, Tape, Tensor};
use sst_atl::transfer::{fine_tune, freeze_plan, mmd, mmd_permutation_null, run_transfer, FreezePlan, MmdConfig, TransferSetup};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, budget: Duration) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure(start.elapsed() < budget, || format!("took {secs:.1}s, budget {}s", budget.as_secs()))?;
    Ok(secs)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `‖a − b‖ / ‖max(|a|, |b|)‖`, zero when both vanish.
fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let norm: f64 = a.iter().zip(b).map(|(x, y)| x.abs().max(y.abs()).powi(2)).sum();
    if norm == 0.0 {
        0.0
    } else {
        (diff / norm).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Gradient correctness
// ---------------------------------------------------------------------------

/// Central differences of `f` (contracted with a fixed random probe) against
/// the tape gradient with respect to every input.
fn op_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    const STEP: f64 = 1e-5;
    let probe = {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &ids);
        random_tensor(tape.value(out).shape(), &mut ChaCha8Rng::seed_from_u64(404))
    };
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &ids);
        tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &ids);
    let w = tape.constant(probe.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, id) in ids.iter().enumerate() {
        let g = grads.get(*id).unwrap().cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            analytic.push(g.data()[j]);
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

fn positive(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap()
}

fn tiny_model_config() -> SstConfig {
    SstConfig {
        window: 4,
        subpatch: 2,
        bands: 3,
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        head_hidden: 8,
        dropout: 0.1,
        ln_eps: 1e-6,
        classes: 3,
        lambda: 0.7,
        renormalize_calibrated: false,
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let c = random_tensor(&[3, 4], &mut rng);
    let bias = random_tensor(&[4], &mut rng);
    let gain = random_tensor(&[4], &mut rng);
    let logits = random_tensor(&[6, 3], &mut rng);

    type Case<'a> = (&'a str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, i| t.matmul(i[0], i[1]).unwrap())),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, i| t.add(i[0], i[1]).unwrap())),
        ("mul", vec![a.clone(), c.clone()], Box::new(|t, i| t.mul(i[0], i[1]).unwrap())),
        ("add_row_bias", vec![a.clone(), bias.clone()], Box::new(|t, i| t.add_row_bias(i[0], i[1]).unwrap())),
        ("scale", vec![a.clone()], Box::new(|t, i| t.scale(i[0], -1.7).unwrap())),
        ("relu", vec![a.clone()], Box::new(|t, i| t.relu(i[0]).unwrap())),
        ("softmax axis 0", vec![a.clone()], Box::new(|t, i| t.softmax(i[0], 0).unwrap())),
        ("softmax axis 1", vec![a.clone()], Box::new(|t, i| t.softmax(i[0], 1).unwrap())),
        ("softmax_rows", vec![a.clone()], Box::new(|t, i| t.softmax_rows(i[0]).unwrap())),
        (
            "layer_norm",
            vec![a.clone(), gain.clone(), bias.clone()],
            Box::new(|t, i| t.layer_norm(i[0], i[1], i[2], 1e-6).unwrap()),
        ),
        ("dropout", vec![a.clone()], Box::new(|t, i| t.dropout(i[0], 0.3, true, 17).unwrap())),
        ("concat_cols", vec![a.clone(), c.clone()], Box::new(|t, i| t.concat_cols(&[i[0], i[1]]).unwrap())),
        ("concat_rows", vec![a.clone(), c.clone()], Box::new(|t, i| t.concat_rows(&[i[0], i[1]]).unwrap())),
        ("slice_cols", vec![a.clone()], Box::new(|t, i| t.slice_cols(i[0], 1, 2).unwrap())),
        ("slice_rows", vec![a.clone()], Box::new(|t, i| t.slice_rows(i[0], 1, 2).unwrap())),
        ("transpose", vec![a.clone()], Box::new(|t, i| t.transpose(i[0]).unwrap())),
        ("reshape", vec![a.clone()], Box::new(|t, i| t.reshape(i[0], &[2, 6]).unwrap())),
        ("normalize_rows", vec![positive(&a)], Box::new(|t, i| t.normalize_rows(i[0]).unwrap())),
        ("sum", vec![a.clone()], Box::new(|t, i| t.sum(i[0]).unwrap())),
        (
            "calibrate",
            vec![logits.clone()],
            Box::new(|t, i| {
                let p = t.softmax_rows(i[0]).unwrap();
                t.calibrate(p, 2, 0.8).unwrap()
            }),
        ),
        (
            "cross_entropy",
            vec![logits.clone()],
            Box::new(|t, i| {
                let p = t.softmax_rows(i[0]).unwrap();
                t.cross_entropy(p, &[0, 2, 1, 1, 0, 2]).unwrap()
            }),
        ),
    ];
    let mut worst = 0.0f64;
    for (name, inputs, f) in &cases {
        let err = op_grad_error(inputs, f);
        ensure(err < 1e-4, || format!("{name}: relative error {err:.3e}"))?;
        worst = worst.max(err);
    }

    // Full forward pass and mean cross-entropy, every parameter tensor.
    let (cube, labels) = synth_cube(&SynthParams {
        classes: 3,
        rows: 6,
        cols: 6,
        bands: 3,
        noise_sigma: 0.2,
        domain_shift: 0.0,
        seed: 5,
    })
    .map_err(|e| e.to_string())?;
    let idx = labels.labeled_indices();
    let windows = extract_windows(&cube, &labels, &idx[..2], 4).map_err(|e| e.to_string())?;
    for renormalize in [false, true] {
        let cfg = SstConfig {
            renormalize_calibrated: renormalize,
            ..tiny_model_config()
        };
        let model = SstModel::new(cfg, 11).map_err(|e| e.to_string())?;
        let mode = Mode::Train { seed: 23 };
        let (_, grads) = model.loss_and_grads(&windows, mode).map_err(|e| e.to_string())?;
        let mut probe = model.clone();
        for (p, grad) in grads.iter().enumerate() {
            let grad = grad.as_ref().ok_or_else(|| format!("{} has no gradient", model.params()[p].name))?;
            let numeric: Vec<f64> = (0..grad.len())
                .map(|j| {
                    let orig = probe.params()[p].value.data()[j];
                    probe.params_mut()[p].value.data_mut()[j] = orig + 1e-5;
                    let plus = probe.loss(&windows, mode).unwrap();
                    probe.params_mut()[p].value.data_mut()[j] = orig - 1e-5;
                    let minus = probe.loss(&windows, mode).unwrap();
                    probe.params_mut()[p].value.data_mut()[j] = orig;
                    (plus - minus) / 2e-5
                })
                .collect();
            let err = rel_error(grad.data(), &numeric);
            ensure(err < 1e-4, || {
                format!("{} (renormalize {renormalize}): relative error {err:.3e}", model.params()[p].name)
            })?;
            worst = worst.max(err);
        }
    }
    let secs = within(start, Duration::from_secs(30))?;
    Ok(format!("{} ops + full model, worst relative error {worst:.2e}, {secs:.1}s", cases.len()))
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let c = rng.gen_range(2..=9);
        let rows: Vec<Vec<u64>> = (0..c)
            .map(|_| (0..c).map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..60) }).collect())
            .collect();
        let n: u64 = rows.iter().flatten().sum();
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        let row_sum = |i: usize| rows[i].iter().sum::<u64>() as f64;
        let col_sum = |j: usize| rows.iter().map(|r| r[j]).sum::<u64>() as f64;
        let diag: f64 = (0..c).map(|i| rows[i][i] as f64).sum();
        let oracle_oa = diag / nf;
        let recalls: Vec<f64> = (0..c).filter(|&i| row_sum(i) > 0.0).map(|i| rows[i][i] as f64 / row_sum(i)).collect();
        let oracle_aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let pe: f64 = (0..c).map(|i| row_sum(i) * col_sum(i)).sum::<f64>() / (nf * nf);
        if (1.0 - pe).abs() < 1e-9 {
            continue;
        }
        let oracle_kappa = (oracle_oa - pe) / (1.0 - pe);

        let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        for (name, got, want) in [
            ("oa", oa(&cm), oracle_oa),
            ("aa", aa(&cm), oracle_aa),
            ("kappa", kappa(&cm), oracle_kappa),
        ] {
            let got = got.map_err(|e| e.to_string())?;
            let err = (got - want).abs();
            ensure(err <= 1e-12, || format!("{name} off by {err:.2e} on {rows:?}"))?;
            worst = worst.max(err);
        }
        checked += 1;
    }
    for c in 2..=8usize {
        let rows: Vec<Vec<u64>> = (0..c)
            .map(|i| (0..c).map(|j| if i == j { rng.gen_range(1..100) } else { 0 }).collect())
            .collect();
        let k = kappa(&ConfusionMatrix::from_rows(&rows).unwrap()).unwrap();
        ensure(k == 1.0, || format!("diagonal {c}x{c} gave kappa {k}"))?;
    }
    let chance = kappa(&ConfusionMatrix::from_rows(&[vec![25, 25], vec![25, 25]]).unwrap()).unwrap();
    ensure(chance == 0.0, || format!("chance fixture gave kappa {chance}"))?;
    Ok(format!("{checked} random matrices, worst deviation {worst:.1e}; diagonal κ=1, chance κ=0"))
}

// ---------------------------------------------------------------------------
// Diversity oracle
// ---------------------------------------------------------------------------

fn diversity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..500 {
        let bands = rng.gen_range(1..=12);
        let data: Vec<f32> = (0..9 * bands).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
        let cube = HsiCube::new(3, 3, bands, data).map_err(|e| e.to_string())?;
        // Every ordered pair of distinct pixels, averaged.
        let mut total = 0.0;
        for a in 0..9 {
            for b in 0..9 {
                if a != b {
                    let (sa, sb) = (cube.spectrum(a / 3, a % 3), cube.spectrum(b / 3, b % 3));
                    total += sa.iter().zip(sb).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
                }
            }
        }
        let oracle = total / 72.0;
        let got = neighborhood_diversity(&cube, (1, 1), 3).map_err(|e| e.to_string())?;
        let err = (got - oracle).abs();
        ensure(err <= 1e-9, || format!("trial {trial}: {got} vs {oracle}"))?;
        worst = worst.max(err);

        for factor in [2.0f32, 0.5, 8.0] {
            let scaled = neighborhood_diversity(&cube.scaled(factor).unwrap(), (1, 1), 3).unwrap();
            ensure(scaled == factor as f64 * got, || format!("trial {trial}: scaling by {factor} gave {scaled} vs {got}"))?;
        }

        let value = rng.gen_range(-4.0f32..4.0);
        let constant = HsiCube::new(3, 3, bands, (0..9 * bands).map(|i| value + (i % bands) as f32).collect()).unwrap();
        let zero = neighborhood_diversity(&constant, (1, 1), 3).unwrap();
        ensure(zero == 0.0, || format!("constant neighborhood gave {zero}"))?;
    }
    Ok(format!("500 neighborhoods, worst deviation {worst:.1e}; constant → 0, scaling exact"))
}

// ---------------------------------------------------------------------------
// Calibration identity
// ---------------------------------------------------------------------------

fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (nq, d) = q.dims2().unwrap();
    let (nk, dv) = v.dims2().unwrap();
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let s: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|t| q.get2(i, t) * k.get2(j, t)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..nk {
            for t in 0..dv {
                out[i * dv + t] += e[j] / z * v.get2(j, t);
            }
        }
    }
    out
}

fn calibration_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..100 {
        let (nq, nk, d, dv) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(1..5));
        let heads = if trial % 2 == 0 { 1 } else { rng.gen_range(2..4) };
        let shape = |rows: usize, cols: usize| if heads == 1 { vec![rows, cols] } else { vec![heads, rows, cols] };
        let q = random_tensor(&shape(nq, d), &mut rng);
        let k = random_tensor(&shape(nk, d), &mut rng);
        let v = random_tensor(&shape(nk, dv), &mut rng);
        let base = attention(&q, &k, &v).map_err(|e| e.to_string())?;
        for renormalize in [false, true] {
            let calibrated = calibrated_attention(&q, &k, &v, 0.0, renormalize).map_err(|e| e.to_string())?;
            ensure(calibrated == base, || format!("trial {trial}: λ=0 differs from plain attention"))?;
        }
        if heads == 1 {
            let oracle = dense_attention(&q, &k, &v);
            let err = rel_error(base.data(), &oracle);
            ensure(err < 1e-12, || format!("trial {trial}: attention deviates from definition by {err:.1e}"))?;
        }
        // The calibration primitive itself is the identity at λ = 0.
        let logits = random_tensor(&[heads * nq, nk], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let p = tape.softmax_rows(x).unwrap();
        let cal = tape.calibrate(p, heads, 0.0).unwrap();
        ensure(tape.value(cal) == tape.value(p), || format!("trial {trial}: calibrate(λ=0) altered weights"))?;
    }

    // One-hot rows: scores separated by thousands saturate the softmax exactly.
    for trial in 0..20 {
        let d = rng.gen_range(2..6);
        let nk = d;
        let nq = rng.gen_range(1..6);
        let k = Tensor::new(vec![nk, d], (0..nk * d).map(|i| if i / d == i % d { 10.0 } else { 0.0 }).collect()).unwrap();
        let q = Tensor::new(
            vec![nq, d],
            (0..nq).flat_map(|_| {
                let hot = rng.gen_range(0..d);
                (0..d).map(move |j| if j == hot { 1000.0 } else { 0.0 })
            })
            .collect(),
        )
        .unwrap();
        let v = random_tensor(&[nk, 3], &mut rng);
        let base = attention(&q, &k, &v).unwrap();
        for lambda in [0.25, 1.0, 7.5, 100.0] {
            for renormalize in [false, true] {
                let got = calibrated_attention(&q, &k, &v, lambda, renormalize).unwrap();
                ensure(got == base, || format!("one-hot trial {trial}: λ={lambda} changed the output"))?;
            }
        }
    }
    Ok("100 random inputs bitwise at λ=0; 20 one-hot fixtures λ-invariant".into())
}

// ---------------------------------------------------------------------------
// Active-learning bookkeeping
// ---------------------------------------------------------------------------

fn micro_setup(strategy: Strategy, query_size: usize, rounds: usize, seed: u64) -> AlSetup {
    AlSetup {
        model: SstConfig {
            window: 2,
            subpatch: 1,
            d_model: 4,
            layers: 1,
            heads: 1,
            d_ff: 8,
            head_hidden: 4,
            dropout: 0.0,
            ..SstConfig::new(6, 3)
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed,
        },
        query: QueryConfig::new(query_size, strategy),
        rounds,
        seed,
    }
}

fn al_bookkeeping() -> Outcome {
    let (cube, labels) = synth_cube(&SynthParams {
        classes: 3,
        rows: 20,
        cols: 20,
        bands: 6,
        noise_sigma: 0.3,
        domain_shift: 0.0,
        seed: 6,
    })
    .map_err(|e| e.to_string())?;
    let manifest = make_split(&labels, [0.1, 0.6, 0.3], 6).map_err(|e| e.to_string())?;
    let universe = manifest.train.len() + manifest.pool.len();
    let query_size = 7;
    for strategy in Strategy::ALL {
        let out = run_active_learning(&cube, &labels, &manifest, &micro_setup(strategy, query_size, 6, 1), |_| Ok(()))
            .map_err(|e| format!("{strategy}: {e}"))?;
        let train: HashSet<usize> = out.train.iter().copied().collect();
        let pool: HashSet<usize> = out.pool.iter().copied().collect();
        ensure(train.len() == out.train.len() && pool.len() == out.pool.len(), || format!("{strategy}: duplicates"))?;
        ensure(train.is_disjoint(&pool), || format!("{strategy}: train and pool overlap"))?;
        ensure(train.len() + pool.len() == universe, || format!("{strategy}: sizes not conserved"))?;
        ensure(manifest.train.iter().all(|i| train.contains(i)), || format!("{strategy}: initial labels lost"))?;
        ensure(out.records.len() == 7, || format!("{strategy}: {} records", out.records.len()))?;
        let mut seen: HashSet<usize> = manifest.train.iter().copied().collect();
        for (round, rec) in out.records.iter().enumerate() {
            let expected = manifest.train.len() + round * query_size;
            ensure(rec.round == round && rec.train_size == expected, || {
                format!("{strategy}: round {round} reports {} labels, expected {expected}", rec.train_size)
            })?;
            for q in &rec.queried_indices {
                ensure(manifest.pool.contains(q) && seen.insert(*q), || format!("{strategy}: bad query {q}"))?;
            }
        }
    }

    // Growth fixture: 75 labels plus one query of 148 gives 223.
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let mut labeled = labels.labeled_indices();
    labeled.shuffle(&mut rng);
    let mut fixture = SplitManifest {
        seed: 75,
        ratios: [0.0, 0.0, 0.0],
        train: labeled[..75].to_vec(),
        pool: labeled[75..300].to_vec(),
        test: labeled[300..].to_vec(),
    };
    fixture.train.sort_unstable();
    fixture.pool.sort_unstable();
    fixture.test.sort_unstable();
    let (t, p) = al_round(&fixture.train, &fixture.pool, &fixture.pool[..148]).map_err(|e| e.to_string())?;
    ensure(t.len() == 223 && p.len() == 225 - 148, || format!("al_round gave {} / {}", t.len(), p.len()))?;
    for strategy in Strategy::ALL {
        let out = run_active_learning(&cube, &labels, &fixture, &micro_setup(strategy, 148, 1, 2), |_| Ok(()))
            .map_err(|e| format!("{strategy}: {e}"))?;
        let sizes: Vec<usize> = out.records.iter().map(|r| r.train_size).collect();
        ensure(sizes == [75, 223], || format!("{strategy}: growth {sizes:?}"))?;
    }
    Ok("5 strategies × 6 rounds disjoint and conserved; growth 75→223 under query 148".to_string())
}

// ---------------------------------------------------------------------------
// Strategy ordering and monotone budget
// ---------------------------------------------------------------------------

/// `per_class` labels per class to train on; the remainder is split evenly into pool and test.
fn few_label_manifest(labels: &LabelMap, per_class: usize, seed: u64) -> SplitManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); labels.classes() + 1];
    for i in labels.labeled_indices() {
        by_class[labels.at_index(i) as usize].push(i);
    }
    let (mut train, mut rest) = (Vec::new(), Vec::new());
    for members in by_class.iter_mut().skip(1) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..per_class]);
        rest.extend_from_slice(&members[per_class..]);
    }
    rest.shuffle(&mut rng);
    let half = rest.len() / 2;
    let mut pool = rest[..half].to_vec();
    let mut test = rest[half..].to_vec();
    train.sort_unstable();
    pool.sort_unstable();
    test.sort_unstable();
    SplitManifest {
        seed,
        ratios: [0.0, 0.5, 0.5],
        train,
        pool,
        test,
    }
}

fn strategy_setup(strategy: Strategy, rounds: usize, seed: u64) -> AlSetup {
    let mut query = QueryConfig::new(16, strategy);
    query.beta = 5;
    query.n_neighborhood = 3;
    AlSetup {
        model: SstConfig {
            window: 8,
            subpatch: 2,
            d_model: 16,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            ..SstConfig::new(16, 4)
        },
        train: TrainConfig {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig {
                lr: 0.003,
                ..AdamConfig::default()
            },
            seed,
        },
        query,
        rounds,
        seed,
    }
}

struct StrategyRuns {
    /// Test OA (percent) of hybrid after rounds 0..=4, per seed.
    hybrid_curves: Vec<Vec<f64>>,
    /// Test OA (percent) of random sampling after 3 rounds, per seed.
    random_final: Vec<f64>,
    seconds: f64,
}

fn strategy_runs() -> Result<StrategyRuns, String> {
    let start = Instant::now();
    let (mut hybrid_curves, mut random_final) = (Vec::new(), Vec::new());
    for seed in 0..7u64 {
        let (cube, labels) = synth_cube(&SynthParams {
            classes: 4,
            rows: 48,
            cols: 48,
            bands: 16,
            noise_sigma: 0.3,
            domain_shift: 0.0,
            seed,
        })
        .map_err(|e| e.to_string())?;
        let manifest = few_label_manifest(&labels, 3, seed);
        let curve = |strategy, rounds| -> Result<Vec<f64>, String> {
            let out = run_active_learning(&cube, &labels, &manifest, &strategy_setup(strategy, rounds, seed), |_| Ok(()))
                .map_err(|e| e.to_string())?;
            Ok(out.records.iter().map(|r| 100.0 * r.oa).collect())
        };
        // Every round retrains from the same initialization, so round 3 of a
        // four-round run is exactly the three-round result.
        hybrid_curves.push(curve(Strategy::Hybrid, 4)?);
        random_final.push(*curve(Strategy::Random, 3)?.last().unwrap());
    }
    Ok(StrategyRuns {
        hybrid_curves,
        random_final,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn strategy_ordering(runs: &Result<StrategyRuns, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let hybrid: Vec<f64> = runs.hybrid_curves.iter().map(|c| c[3]).collect();
    let diffs: Vec<f64> = hybrid.iter().zip(&runs.random_final).map(|(h, r)| h - r).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let detail = format!(
        "hybrid {:.2} vs random {:.2} at 60 labels, per-seed gaps {:?}, {:.0}s",
        mean(&hybrid),
        mean(&runs.random_final),
        diffs.iter().map(|d| format!("{d:+.2}")).collect::<Vec<_>>(),
        runs.seconds
    );
    ensure(mean(&diffs) >= 1.0, || format!("mean gap below 1.0: {detail}"))?;
    ensure(diffs.iter().all(|d| *d >= -0.5), || format!("a seed lost by more than 0.5: {detail}"))?;
    ensure(runs.seconds < 600.0, || format!("over 10 minutes: {detail}"))?;
    Ok(detail)
}

fn monotone_budget(runs: &Result<StrategyRuns, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let rounds = runs.hybrid_curves[0].len();
    let means: Vec<f64> = (0..rounds)
        .map(|r| runs.hybrid_curves.iter().map(|c| c[r]).sum::<f64>() / runs.hybrid_curves.len() as f64)
        .collect();
    let detail = format!("mean OA by round {:?}", means.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>());
    for w in means.windows(2) {
        ensure(w[1] >= w[0] - 1.0, || format!("drop of {:.2}: {detail}", w[0] - w[1]))?;
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// MMD sanity
// ---------------------------------------------------------------------------

fn gaussian_cloud(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * d)
        .map(|i| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) + if i % d == 0 { shift } else { 0.0 })
        .collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn percentile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = ((values.len() - 1) as f64 * q).ceil() as usize;
    values[pos]
}

fn mmd_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = MmdConfig::default();
    let x = gaussian_cloud(256, 4, 0.0, &mut rng);
    let self_mmd = mmd(&x, &x, &cfg).map_err(|e| e.to_string())?;
    ensure(self_mmd.abs() <= 1e-12, || format!("mmd(X, X) = {self_mmd}"))?;

    let far = gaussian_cloud(256, 4, 10.0, &mut rng);
    let separated = mmd(&x, &far, &cfg).unwrap();
    let null = mmd_permutation_null(&x, &far, &cfg, 200, 1).unwrap();
    let p99 = percentile(null, 0.99);
    ensure(separated > p99, || format!("separated {separated:.4} not above null p99 {p99:.4}"))?;

    let same = gaussian_cloud(256, 4, 0.0, &mut rng);
    let alike = mmd(&x, &same, &cfg).unwrap();
    let null = mmd_permutation_null(&x, &same, &cfg, 200, 2).unwrap();
    let p90 = percentile(null, 0.90);
    ensure(alike < p90, || format!("identical-distribution mmd {alike:.5} not below null p90 {p90:.5}"))?;
    Ok(format!("self {self_mmd:.0e}; separated {separated:.3} > p99 {p99:.4}; alike {alike:.5} < p90 {p90:.5}"))
}

// ---------------------------------------------------------------------------
// Freezing contract and transfer
// ---------------------------------------------------------------------------

fn small_transfer_config() -> SstConfig {
    SstConfig {
        window: 8,
        subpatch: 2,
        d_model: 16,
        layers: 2,
        heads: 2,
        dropout: 0.0,
        ..SstConfig::new(16, 4)
    }
}

fn transfer_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        adam: AdamConfig {
            lr: 0.003,
            ..AdamConfig::default()
        },
        seed,
    }
}

fn domain(shift: f64, seed: u64, rows: usize) -> (HsiCube, LabelMap) {
    synth_cube(&SynthParams {
        classes: 4,
        rows,
        cols: rows,
        bands: 16,
        noise_sigma: 0.3,
        domain_shift: shift,
        seed,
    })
    .unwrap()
}

fn windows_for(cube: &HsiCube, labels: &LabelMap, fraction: f64, seed: u64, window: usize) -> Vec<PatchWindow> {
    let m = make_split(labels, [fraction, 0.0, 1.0 - fraction], seed).unwrap();
    extract_windows(cube, labels, &m.train, window).unwrap()
}

fn freezing_contract() -> Outcome {
    let cfg = SstConfig {
        layers: 3,
        ..small_transfer_config()
    };
    let (a, la) = domain(0.0, 30, 24);
    let (b, lb) = domain(FRAC_PI_2, 31, 24);
    let source = windows_for(&a, &la, 0.3, 1, cfg.window);
    let target = windows_for(&b, &lb, 0.2, 2, cfg.window);
    let mut base = SstModel::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    base.train(&source, &transfer_train(3, 3)).map_err(|e| e.to_string())?;
    let mmd_cfg = MmdConfig {
        sample_count: 64,
        ..MmdConfig::default()
    };

    let mut plans: Vec<FreezePlan> = Vec::new();
    for rho in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0] {
        plans.push(freeze_plan(&base, &source, &target, rho, &mmd_cfg).map_err(|e| e.to_string())?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..4 {
        let scores: Vec<f64> = (0..cfg.layers).map(|_| rng.gen_range(0.0..1.0)).collect();
        plans.push(FreezePlan::from_scores(scores, vec![0.0; cfg.layers], rng.gen_range(0.0..=1.0)).unwrap());
    }
    let mut frozen_total = 0;
    for plan in &plans {
        let mut model = base.clone();
        fine_tune(&mut model, &target, 4, plan, &transfer_train(2, 4)).map_err(|e| e.to_string())?;
        let flags = plan.flags();
        for (before, after) in base.params().iter().zip(model.params()) {
            let frozen = flags.is_frozen(before.group);
            let same = before.value.data().iter().zip(after.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if frozen {
                frozen_total += 1;
                ensure(same, || format!("rho {}: frozen {} changed", plan.rho, before.name))?;
            }
            if plan.rho == 1.0 {
                ensure(same == (before.group != ParamGroup::Head), || {
                    format!("rho 1: {} {}", before.name, if same { "unchanged" } else { "changed" })
                })?;
            }
        }
    }
    Ok(format!("{} plans, {frozen_total} frozen tensors bitwise unchanged; rho=1 moves only the head", plans.len()))
}

fn transfer_gain() -> Outcome {
    let start = Instant::now();
    let mut gains = Vec::new();
    let (mut zero, mut tuned) = (0.0, 0.0);
    for seed in 0..5u64 {
        let (a, la) = domain(0.0, seed, 48);
        let (b, lb) = domain(FRAC_PI_2, seed + 100, 48);
        let cfg = small_transfer_config();
        let mut model = SstModel::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let split = make_split(&la, [0.2, 0.0, 0.8], seed).map_err(|e| e.to_string())?;
        let train = extract_windows(&a, &la, &split.train, cfg.window).map_err(|e| e.to_string())?;
        model.train(&train, &transfer_train(50, seed)).map_err(|e| e.to_string())?;
        let source = extract_windows(&a, &la, &split.test, cfg.window).map_err(|e| e.to_string())?;
        let setup = TransferSetup {
            rho: 0.5,
            target_fraction: 0.1,
            mmd: MmdConfig {
                sample_count: 128,
                ..MmdConfig::default()
            },
            train: transfer_train(50, seed),
            seed,
        };
        let (_, report) = run_transfer(&model, &source, &b, &lb, &setup).map_err(|e| e.to_string())?;
        zero += 100.0 * report.zero_shot.oa / 5.0;
        tuned += 100.0 * report.fine_tuned.oa / 5.0;
        gains.push(100.0 * (report.fine_tuned.oa - report.zero_shot.oa));
    }
    let gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("zero-shot {zero:.2} → fine-tuned {tuned:.2} (gain {gain:.2}), {secs:.0}s");
    ensure(gain >= 5.0, || format!("gain below 5 points: {detail}"))?;
    within(start, Duration::from_secs(300))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Separability and formats
// ---------------------------------------------------------------------------

fn separability() -> Outcome {
    let (cube, labels) = synth_cube(&SynthParams {
        classes: 4,
        rows: 48,
        cols: 48,
        bands: 16,
        noise_sigma: 0.0,
        domain_shift: 0.0,
        seed: 1,
    })
    .map_err(|e| e.to_string())?;
    let split = make_split(&labels, [0.3, 0.0, 0.7], 3).map_err(|e| e.to_string())?;
    let cfg = SstConfig {
        window: 4,
        ..SstConfig::new(16, 4)
    };
    let train = extract_windows(&cube, &labels, &split.train, cfg.window).map_err(|e| e.to_string())?;
    let test = extract_windows(&cube, &labels, &split.test, cfg.window).map_err(|e| e.to_string())?;
    let mut model = SstModel::new(cfg, 0).map_err(|e| e.to_string())?;
    model
        .train(
            &train,
            &TrainConfig {
                epochs: 50,
                batch_size: 56,
                adam: AdamConfig::default(),
                seed: 0,
            },
        )
        .map_err(|e| e.to_string())?;
    let score = |w: &[PatchWindow]| -> Result<f64, String> {
        let preds = model.predict(w).map_err(|e| e.to_string())?;
        let truth: Vec<u16> = w.iter().map(|x| x.label).collect();
        Ok(100.0 * MetricsReport::from_predictions(&preds, &truth, 4).map_err(|e| e.to_string())?.oa)
    };
    let (train_oa, test_oa) = (score(&train)?, score(&test)?);
    let detail = format!("train OA {train_oa:.2} on {}, test OA {test_oa:.2} on {}", train.len(), test.len());
    ensure(train_oa == 100.0 && test_oa >= 99.0, || detail.clone())?;
    Ok(detail)
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let instances = 40;
    for i in 0..instances {
        let (rows, cols, bands) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..10));
        let data: Vec<f32> = (0..rows * cols * bands)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => f32::MIN_POSITIVE * rng.gen_range(-1.0f32..1.0),
                _ => rng.gen_range(-1e6f32..1e6),
            })
            .collect();
        let cube = HsiCube::new(rows, cols, bands, data).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("c{i}.hsic"));
        save_cube(&cube, &path).map_err(|e| e.to_string())?;
        let on_disk = std::fs::read(&path).unwrap();
        let back = load_cube(&path).map_err(|e| e.to_string())?;
        ensure(back == cube && back.to_bytes() == on_disk, || format!("cube {i} round trip differs"))?;

        let classes = rng.gen_range(1..=(rows * cols).min(20));
        let mut labels: Vec<u16> = (0..rows * cols).map(|_| rng.gen_range(0..=classes as u16)).collect();
        for c in 1..=classes {
            labels[c - 1] = c as u16;
        }
        labels.shuffle(&mut rng);
        let map = LabelMap::new(rows, cols, labels).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("l{i}.hsil"));
        save_labels(&map, &path).map_err(|e| e.to_string())?;
        let on_disk = std::fs::read(&path).unwrap();
        let back = load_labels(&path).map_err(|e| e.to_string())?;
        ensure(back == map && back.to_bytes() == on_disk, || format!("labels {i} round trip differs"))?;

        let subpatch = rng.gen_range(1..=2);
        let heads = rng.gen_range(1..=2);
        let cfg = SstConfig {
            window: 2 * rng.gen_range(1..=3),
            subpatch,
            bands: rng.gen_range(1..6),
            d_model: heads * rng.gen_range(2..=4),
            layers: rng.gen_range(1..=3),
            heads,
            d_ff: rng.gen_range(1..8),
            head_hidden: rng.gen_range(1..8),
            dropout: rng.gen_range(0.0..0.5),
            ln_eps: 1e-6,
            classes: rng.gen_range(2..6),
            lambda: rng.gen_range(0.0..2.0),
            renormalize_calibrated: rng.gen_bool(0.5),
        };
        let model = SstModel::new(cfg, rng.gen()).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("m{i}.sstk"));
        save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
        let on_disk = std::fs::read(&path).unwrap();
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        ensure(back == model && back.to_checkpoint_bytes() == on_disk, || format!("checkpoint {i} round trip differs"))?;
    }
    Ok(format!("{instances} random cubes, label maps and checkpoints byte-identical"))
}

// ---------------------------------------------------------------------------

fn run(name: &str, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name:<28} {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL  {name:<28} {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut passed = Vec::new();
    let mut results = |name: &str, check: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            passed.push(run(name, check));
        }
    };

    results("gradient correctness", &mut gradient_correctness);
    results("metric oracles", &mut metric_oracles);
    results("diversity oracle", &mut diversity_oracle);
    results("calibration identity", &mut calibration_identity);
    results("al bookkeeping", &mut al_bookkeeping);
    let needs_runs = wanted("strategy ordering") || wanted("monotone budget");
    let runs = if needs_runs { strategy_runs() } else { Err("skipped".into()) };
    results("strategy ordering", &mut || strategy_ordering(&runs));
    results("monotone budget", &mut || monotone_budget(&runs));
    results("mmd sanity", &mut mmd_sanity);
    results("freezing contract", &mut freezing_contract);
    results("transfer gain", &mut transfer_gain);
    results("separability", &mut separability);
    results("format round trips", &mut format_round_trips);

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
