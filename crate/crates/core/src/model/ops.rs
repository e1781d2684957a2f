use crate::hsi::PatchWindow;
use crate::numerics::{stacked_row_uncertainty, NumericsError, Tape, Tensor};

use super::graph::{self, Mode};
use super::{ModelError, SstModel};

/// Sinusoidal table `[n × d]`: column `2j` is `sin(i / 10000^(2j/d))`, column
/// `2j+1` the matching cosine.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for c in 0..d {
            let even = c - c % 2;
            let angle = i as f64 / 10000f64.powf(even as f64 / d as f64);
            out.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![n, d], out).expect("table shape")
}

/// Embed a window's `p×p` subpatches with kernel bank `w_e: [p·p·k × d]`.
pub fn embed_patches(window: &PatchWindow, w_e: &Tensor, subpatch: usize) -> Result<Tensor, ModelError> {
    if subpatch == 0 || !window.size.is_multiple_of(subpatch) {
        return Err(ModelError::SubpatchDoesNotDivide {
            window: window.size,
            subpatch,
        });
    }
    let patch_len = subpatch * subpatch * window.bands;
    let tokens = (window.size / subpatch).pow(2);
    let x = Tensor::new(vec![tokens, patch_len], graph::unfold(window, subpatch))?;
    Ok(crate::numerics::matmul(&x, w_e)?)
}

/// Splits `[h × n × d]` into column blocks `[n × h·d]`; rank 2 is one head.
fn heads_to_cols(t: &Tensor) -> Result<(Tensor, usize), NumericsError> {
    match *t.shape() {
        [_, _] => Ok((t.clone(), 1)),
        [h, n, d] => {
            let mut out = vec![0.0; h * n * d];
            for hh in 0..h {
                for i in 0..n {
                    for j in 0..d {
                        out[i * h * d + hh * d + j] = t.data()[(hh * n + i) * d + j];
                    }
                }
            }
            Ok((Tensor::new(vec![n, h * d], out)?, h))
        }
        _ => Err(NumericsError::ShapeMismatch {
            op: "attention",
            detail: format!("expected rank 2 or 3, got {:?}", t.shape()),
        }),
    }
}

fn cols_to_heads(t: &Tensor, heads: usize, rank3: bool) -> Tensor {
    if !rank3 {
        return t.clone();
    }
    let (n, width) = t.dims2().expect("rank 2");
    let d = width / heads;
    let mut out = vec![0.0; n * width];
    for h in 0..heads {
        for i in 0..n {
            for j in 0..d {
                out[(h * n + i) * d + j] = t.data()[i * width + h * d + j];
            }
        }
    }
    Tensor::new(vec![heads, n, d], out).expect("same size")
}

/// `softmax(QKᵀ/√d_k)·V`. Accepts one head (`[n × d]`) or stacked heads (`[h × n × d]`).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, ModelError> {
    calibrated_attention(q, k, v, 0.0, false)
}

/// Attention with rows scaled by `1 + λ·U_i`, `U` from [`token_uncertainty`]
/// over all heads. With `renormalize`, scaled rows are re-divided by their sums.
pub fn calibrated_attention(q: &Tensor, k: &Tensor, v: &Tensor, lambda: f64, renormalize: bool) -> Result<Tensor, ModelError> {
    if !(lambda >= 0.0) {
        return Err(NumericsError::NegativeLambda(lambda).into());
    }
    let rank3 = q.shape().len() == 3;
    if [k, v].iter().any(|t| (t.shape().len() == 3) != rank3) || (rank3 && (q.shape()[0] != k.shape()[0] || k.shape()[0] != v.shape()[0])) {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            detail: format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        }
        .into());
    }
    let (qc, heads) = heads_to_cols(q)?;
    let (kc, _) = heads_to_cols(k)?;
    let (vc, _) = heads_to_cols(v)?;
    let mut tape = Tape::new();
    let (qn, kn, vn) = (tape.constant(qc), tape.constant(kc), tape.constant(vc));
    let out = graph::attend(&mut tape, qn, kn, vn, heads, lambda, renormalize)?;
    Ok(cols_to_heads(tape.value(out), heads, rank3))
}

/// Head-averaged entropy of each attention row, divided by `ln N`, in `[0, 1]`.
/// Accepts `[h × N × N]` or a single `[N × N]` map.
pub fn token_uncertainty(weights: &Tensor) -> Result<Tensor, ModelError> {
    let (h, n_q, n_k) = match *weights.shape() {
        [r, c] => (1, r, c),
        [h, r, c] => (h, r, c),
        _ => {
            return Err(NumericsError::ShapeMismatch {
                op: "token_uncertainty",
                detail: format!("expected rank 2 or 3, got {:?}", weights.shape()),
            }
            .into())
        }
    };
    for (row, chunk) in weights.data().chunks(n_k.max(1)).enumerate() {
        let sum: f64 = chunk.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || chunk.iter().any(|&p| p < 0.0) {
            return Err(ModelError::NotDistribution { row, sum });
        }
    }
    Ok(Tensor::new(vec![n_q], stacked_row_uncertainty(weights.data(), h, n_q, n_k))?)
}

impl SstModel {
    /// Patch embedding plus positions for one window, `[N × d]`.
    pub fn embed(&self, window: &PatchWindow) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let nodes = self.bind_constants(&mut tape);
        let z = graph::embed_batch(&mut tape, self, &nodes, std::slice::from_ref(window))?;
        Ok(tape.value(z).clone())
    }

    /// Run encoder layer `layer` on one window's tokens `z: [N × d]`.
    pub fn encoder_block(&self, layer: usize, z: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        if layer >= self.config().layers {
            return Err(ModelError::LayerOutOfRange {
                index: layer,
                layers: self.config().layers,
            });
        }
        self.check_tokens(z)?;
        let mut tape = Tape::new();
        let nodes = self.bind_constants(&mut tape);
        let zn = tape.constant(z.clone());
        let out = graph::encoder_block(&mut tape, self, &nodes, layer, zn, 1, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Class-token pooling of final tokens `z: [N × d]` into a `[1 × d]` row.
    pub fn cross_attention_pool(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        self.check_tokens(z)?;
        let mut tape = Tape::new();
        let nodes = self.bind_constants(&mut tape);
        let zn = tape.constant(z.clone());
        let out = graph::cross_attention_pool(&mut tape, self, &nodes, zn, 1)?;
        Ok(tape.value(out).clone())
    }

    /// Class probabilities for pooled rows `[B × d]`.
    pub fn classify(&self, pooled: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let nodes = self.bind_constants(&mut tape);
        let x = tape.constant(pooled.clone());
        let out = graph::classify(&mut tape, self, &nodes, x)?;
        Ok(tape.value(out).clone())
    }

    fn check_tokens(&self, z: &Tensor) -> Result<(), ModelError> {
        let d = self.config().d_model;
        match z.dims2() {
            Some((n, w)) if w == d && n >= 1 => Ok(()),
            _ => Err(NumericsError::ShapeMismatch {
                op: "encoder",
                detail: format!("tokens {:?}, expected [N x {d}]", z.shape()),
            }
            .into()),
        }
    }
}
