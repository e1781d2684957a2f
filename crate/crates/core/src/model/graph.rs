//! Builds the forward pass on a [`Tape`]. Windows in a batch are stacked along
//! rows (`[B·N × d]`) for the position-wise layers; attention and pooling run
//! per window.

use crate::hsi::PatchWindow;
use crate::numerics::{NodeId, Tape, Tensor};

use super::*;

/// Evaluation is deterministic; training enables dropout seeded by `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    fn dropout_seed(self, layer: usize, site: u64) -> Option<u64> {
        match self {
            Mode::Eval => None,
            Mode::Train { seed } => Some(mix(mix(seed, layer as u64), site)),
        }
    }
}

/// splitmix64 step, used to derive independent sub-seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rows of non-overlapping `p×p×k` subpatches, token order row-major over the
/// subpatch grid, values ordered `(m, n, band)`.
pub(crate) fn unfold(window: &PatchWindow, p: usize) -> Vec<f64> {
    let side = window.size / p;
    let k = window.bands;
    let mut out = Vec::with_capacity(window.data.len());
    for u in 0..side {
        for v in 0..side {
            for m in 0..p {
                let row = u * p + m;
                let start = (row * window.size + v * p) * k;
                out.extend_from_slice(&window.data[start..start + p * k]);
            }
        }
    }
    out
}

/// `P + E_pos` for every window, stacked: `[B·N × d]`.
pub(crate) fn embed_batch(
    tape: &mut Tape,
    model: &SstModel,
    nodes: &[NodeId],
    windows: &[PatchWindow],
) -> Result<NodeId, ModelError> {
    let cfg = model.config();
    let n = cfg.tokens();
    let mut rows = Vec::with_capacity(windows.len() * n * cfg.patch_len());
    let mut pos = Vec::with_capacity(windows.len() * n * cfg.d_model);
    for w in windows {
        model.check_window(w)?;
        rows.extend(unfold(w, cfg.subpatch));
        pos.extend_from_slice(model.positions().data());
    }
    let x = tape.constant(Tensor::new(vec![windows.len() * n, cfg.patch_len()], rows)?);
    let p = tape.matmul(x, nodes[0])?;
    let e = tape.constant(Tensor::new(vec![windows.len() * n, cfg.d_model], pos)?);
    Ok(tape.add(p, e)?)
}

/// Multi-head (optionally calibrated) attention for a single window.
/// `q`, `k`, `v` are `[N × heads·d_k]`; the result is `[N × heads·d_v]`.
pub(crate) fn attend(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    lambda: f64,
    renormalize: bool,
) -> Result<NodeId, ModelError> {
    let (n_q, width) = tape.value(q).dims2().ok_or_else(|| ModelError::InvalidConfig("q must be 2-D".into()))?;
    let (n_k, k_width) = tape.value(k).dims2().ok_or_else(|| ModelError::InvalidConfig("k must be 2-D".into()))?;
    let (n_v, v_width) = tape.value(v).dims2().ok_or_else(|| ModelError::InvalidConfig("v must be 2-D".into()))?;
    if width != k_width || n_k != n_v || width % heads != 0 || v_width % heads != 0 {
        return Err(crate::numerics::NumericsError::ShapeMismatch {
            op: "attention",
            detail: format!("q [{n_q}x{width}], k [{n_k}x{k_width}], v [{n_v}x{v_width}], {heads} heads"),
        }
        .into());
    }
    let dk = width / heads;
    let dv = v_width / heads;
    let inv = 1.0 / (dk as f64).sqrt();
    let mut scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        scores.push(tape.scale(s, inv)?);
    }
    let stacked = if heads == 1 { scores[0] } else { tape.concat_rows(&scores)? };
    let mut a = tape.softmax_rows(stacked)?;
    if lambda > 0.0 {
        a = tape.calibrate(a, heads, lambda)?;
        if renormalize {
            a = tape.normalize_rows(a)?;
        }
    } else if lambda < 0.0 {
        return Err(crate::numerics::NumericsError::NegativeLambda(lambda).into());
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let ah = if heads == 1 { a } else { tape.slice_rows(a, h * n_q, n_q)? };
        let vh = if heads == 1 { v } else { tape.slice_cols(v, h * dv, dv)? };
        outs.push(tape.matmul(ah, vh)?);
    }
    Ok(if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? })
}

/// One encoder block over a stacked batch `z: [B·N × d]`.
pub(crate) fn encoder_block(
    tape: &mut Tape,
    model: &SstModel,
    nodes: &[NodeId],
    layer: usize,
    z: NodeId,
    batch: usize,
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let cfg = model.config();
    let n = cfg.tokens();
    let p = &nodes[layer_base(layer)..layer_base(layer) + PER_LAYER];
    let q = tape.matmul(z, p[W_Q])?;
    let k = tape.matmul(z, p[W_K])?;
    let v = tape.matmul(z, p[W_V])?;
    let mut per_window = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, kb, vb) = if batch == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, b * n, n)?,
                tape.slice_rows(k, b * n, n)?,
                tape.slice_rows(v, b * n, n)?,
            )
        };
        per_window.push(attend(tape, qb, kb, vb, cfg.heads, cfg.lambda, cfg.renormalize_calibrated)?);
    }
    let heads = if batch == 1 { per_window[0] } else { tape.concat_rows(&per_window)? };
    let mhsa = tape.matmul(heads, p[W_O])?;
    let mhsa = maybe_dropout(tape, mhsa, cfg.dropout, mode, layer, 0)?;
    let res1 = tape.add(z, mhsa)?;
    let z1 = tape.layer_norm(res1, p[LN1_G], p[LN1_B], cfg.ln_eps)?;

    let h = tape.matmul(z1, p[W_1])?;
    let h = tape.add_row_bias(h, p[B_1])?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, p[W_2])?;
    let f = tape.add_row_bias(f, p[B_2])?;
    let f = maybe_dropout(tape, f, cfg.dropout, mode, layer, 1)?;
    let res2 = tape.add(z1, f)?;
    Ok(tape.layer_norm(res2, p[LN2_G], p[LN2_B], cfg.ln_eps)?)
}

fn maybe_dropout(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    mode: Mode,
    layer: usize,
    site: u64,
) -> Result<NodeId, ModelError> {
    match mode.dropout_seed(layer, site) {
        Some(seed) => Ok(tape.dropout(x, rate, true, seed)?),
        None => Ok(x),
    }
}

/// Class-token cross-attention: one pooled `d`-vector per window, `[B × d]`.
pub(crate) fn cross_attention_pool(
    tape: &mut Tape,
    model: &SstModel,
    nodes: &[NodeId],
    z: NodeId,
    batch: usize,
) -> Result<NodeId, ModelError> {
    let cfg = model.config();
    let n = cfg.tokens();
    let base = pool_base(cfg);
    let (q_c, w_kc, w_vc) = (nodes[base], nodes[base + 1], nodes[base + 2]);
    let k = tape.matmul(z, w_kc)?;
    let v = tape.matmul(z, w_vc)?;
    let inv = 1.0 / (cfg.d_model as f64).sqrt();
    let mut pooled = Vec::with_capacity(batch);
    for b in 0..batch {
        let kb = if batch == 1 { k } else { tape.slice_rows(k, b * n, n)? };
        let vb = if batch == 1 { v } else { tape.slice_rows(v, b * n, n)? };
        let kt = tape.transpose(kb)?;
        let s = tape.matmul(q_c, kt)?;
        let s = tape.scale(s, inv)?;
        let a = tape.softmax_rows(s)?;
        pooled.push(tape.matmul(a, vb)?);
    }
    Ok(if batch == 1 { pooled[0] } else { tape.concat_rows(&pooled)? })
}

/// `Softmax(ReLU(x·W₃ + b₃)·W₄ + b₄)` row-wise.
pub(crate) fn classify(tape: &mut Tape, model: &SstModel, nodes: &[NodeId], pooled: NodeId) -> Result<NodeId, ModelError> {
    let base = pool_base(model.config()) + 3;
    let h = tape.matmul(pooled, nodes[base])?;
    let h = tape.add_row_bias(h, nodes[base + 1])?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, nodes[base + 2])?;
    let logits = tape.add_row_bias(logits, nodes[base + 3])?;
    Ok(tape.softmax_rows(logits)?)
}

/// Probability rows `[B × C]`.
pub(crate) fn forward_batch(
    tape: &mut Tape,
    model: &SstModel,
    nodes: &[NodeId],
    windows: &[PatchWindow],
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let mut z = embed_batch(tape, model, nodes, windows)?;
    for layer in 0..model.config().layers {
        z = encoder_block(tape, model, nodes, layer, z, windows.len(), mode)?;
    }
    let pooled = cross_attention_pool(tape, model, nodes, z, windows.len())?;
    classify(tape, model, nodes, pooled)
}

pub(crate) fn targets(model: &SstModel, windows: &[PatchWindow]) -> Result<Vec<usize>, ModelError> {
    let classes = model.config().classes;
    windows
        .iter()
        .map(|w| {
            if w.label == 0 || w.label as usize > classes {
                Err(ModelError::LabelOutOfRange { label: w.label, classes })
            } else {
                Ok(w.label as usize - 1)
            }
        })
        .collect()
}

/// Mean cross-entropy node for a labeled batch.
pub(crate) fn loss_node(
    tape: &mut Tape,
    model: &SstModel,
    nodes: &[NodeId],
    windows: &[PatchWindow],
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let t = targets(model, windows)?;
    let probs = forward_batch(tape, model, nodes, windows, mode)?;
    Ok(tape.cross_entropy(probs, &t)?)
}
