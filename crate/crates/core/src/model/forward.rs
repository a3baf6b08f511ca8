use super::config::{NaimConfig, TokenKind, NUM_PRESENT_ROW};
use super::params::{LayerIndex, NaimParameters};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, RowPick, Tape, Tensor, Var};

/// Which attention mask the encoder applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Missing features neither attend nor are attended to.
    Double,
    /// Column masking only; missing features still attend to present ones.
    Classic,
}

/// Row-major block of `n` samples.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub values: &'a [f64],
    pub present: &'a [bool],
    pub n: usize,
}

/// Nodes recorded by [`record_forward`].
#[derive(Debug)]
pub struct ForwardTrace {
    /// One leaf per parameter array, in [`NaimParameters::tensors`] order.
    pub params: Vec<Var>,
    /// `[n * m, d_e]` token embeddings.
    pub embedding: Var,
    /// Per layer, the attention node; its `[n * h, m, m]` weights come from
    /// [`Tape::attention_weights`].
    pub attention: Vec<Var>,
    /// Per layer, `[n * m, d_e]` outputs.
    pub layer_outputs: Vec<Var>,
    /// `[n, C]`.
    pub logits: Var,
}

/// Lookup picks for the embedding tables. Missing cells select the
/// padding row; their raw values are never read.
pub fn embedding_picks(tokens: &[TokenKind], batch: Batch<'_>) -> Result<Vec<RowPick>> {
    let m = tokens.len();
    if batch.values.len() != batch.n * m || batch.present.len() != batch.n * m {
        return Err(Error::shape(
            "embedding",
            format!("{} samples x {m} features, {} values, {} flags", batch.n, batch.values.len(), batch.present.len()),
        ));
    }
    let mut picks = Vec::with_capacity(batch.n * m);
    for s in 0..batch.n {
        for (j, &kind) in tokens.iter().enumerate() {
            let c = s * m + j;
            let pick = match (batch.present[c], kind) {
                (false, k) => RowPick { table: j, row: k.padding_row(), scale: 1.0 },
                (true, TokenKind::Numerical) => {
                    let v = batch.values[c];
                    if !v.is_finite() {
                        return Err(Error::Contract(format!("non-finite value at sample {s}, feature {j}")));
                    }
                    RowPick { table: j, row: NUM_PRESENT_ROW, scale: v }
                }
                (true, TokenKind::Categorical(k)) => {
                    let v = batch.values[c];
                    if !(v >= 0.0 && v < k as f64 && v.fract() == 0.0) {
                        return Err(Error::Index(format!("code {v} for feature {j} with {k} categories")));
                    }
                    RowPick { table: j, row: v as usize, scale: 1.0 }
                }
            };
            picks.push(pick);
        }
    }
    Ok(picks)
}

/// Records the full network on `tape`. With `trainable` false the
/// parameters enter as constants and no gradient bookkeeping is kept.
pub fn record_forward(
    tape: &mut Tape,
    params: &NaimParameters,
    batch: Batch<'_>,
    kind: AttentionKind,
    trainable: bool,
) -> Result<ForwardTrace> {
    let cfg = params.config();
    let tokens = params.tokens();
    let (m, n, d, h) = (tokens.len(), batch.n, cfg.d_e, cfg.heads);
    let picks = embedding_picks(tokens, batch)?;
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect::<Result<_>>()?;
    let idx = params.index();
    let p = |i: usize| vars[i];

    let tables: Vec<Var> = idx.tables.iter().map(|&i| p(i)).collect();
    let mut x = tape.gather_rows(&tables, &picks)?;
    if let Some(b) = idx.embedding_bias {
        let x3 = tape.reshape(x, [n, m, d])?;
        let x3 = tape.add_broadcast(x3, p(b))?;
        x = tape.reshape(x3, [n * m, d])?;
    }
    let embedding = x;

    let blocked = attention_mask(batch.present, n, m, h);
    let mut attention = Vec::with_capacity(cfg.layers);
    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    for layer in &idx.layers {
        let (out, a) = record_encoder_layer(tape, &vars, layer, cfg, x, m, &blocked, kind)?;
        attention.push(a);
        layer_outputs.push(out);
        x = out;
    }
    let normed = tape.layer_norm(x, p(idx.final_gain), p(idx.final_bias), cfg.norm_eps)?;
    let flat = tape.reshape(normed, [n, m * d])?;
    let logits = tape.linear(flat, p(idx.head_w), p(idx.head_b))?;
    Ok(ForwardTrace { params: vars, embedding, attention, layer_outputs, logits })
}

/// Per-(sample, head) column mask for [`Tape::softmax_rows`]: the
/// missing flags of each sample repeated once per head.
pub(crate) fn attention_mask(present: &[bool], n: usize, m: usize, heads: usize) -> Vec<bool> {
    let mut blocked = Vec::with_capacity(n * heads * m);
    for s in 0..n {
        for _ in 0..heads {
            blocked.extend(present[s * m..(s + 1) * m].iter().map(|&p| !p));
        }
    }
    blocked
}

/// One post-norm encoder layer over `x: [n * m, d_e]`. Returns the layer
/// output and the attention node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_encoder_layer(
    tape: &mut Tape,
    vars: &[Var],
    layer: &LayerIndex,
    cfg: &NaimConfig,
    x: Var,
    m: usize,
    blocked: &[bool],
    kind: AttentionKind,
) -> Result<(Var, Var)> {
    let h = cfg.heads;
    let p = |i: usize| vars[i];
    let project = |tape: &mut Tape, heads: &[usize]| -> Result<Var> {
        let w: Vec<Var> = heads.iter().map(|&i| p(i)).collect();
        let w = tape.concat_cols(&w)?;
        let y = tape.matmul(x, w)?;
        tape.split_heads(y, m, h)
    };
    let q = project(tape, &layer.wq)?;
    let k = project(tape, &layer.wk)?;
    let v = project(tape, &layer.wv)?;
    let heads_out = record_attention(tape, q, k, v, blocked, cfg.head_dim(), kind)?;
    let merged = tape.merge_heads(heads_out, h)?;
    let projected = tape.linear(merged, p(layer.wo), p(layer.bo))?;
    let res = tape.add(x, projected)?;
    let x1 = tape.layer_norm(res, p(layer.norm1_gain), p(layer.norm1_bias), cfg.norm_eps)?;
    let ff = tape.feed_forward(x1, p(layer.ff1_w), p(layer.ff1_b), p(layer.ff2_w), p(layer.ff2_b))?;
    let res = tape.add(x1, ff)?;
    let out = tape.layer_norm(res, p(layer.norm2_gain), p(layer.norm2_bias), cfg.norm_eps)?;
    Ok((out, heads_out))
}

/// `softmax(q kᵀ / sqrt(d_h)) v` over present columns; for
/// [`AttentionKind::Double`] the rows of missing features are zero as well.
pub(crate) fn record_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    blocked: &[bool],
    head_dim: usize,
    kind: AttentionKind,
) -> Result<Var> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    tape.masked_attention(q, k, v, blocked, scale, kind == AttentionKind::Double)
}

/// Mean cross-entropy of a batch and its gradient for every parameter
/// array (frozen rows included, always zero).
pub fn loss_and_gradients(
    params: &NaimParameters,
    batch: Batch<'_>,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let trace = record_forward(&mut tape, params, batch, AttentionKind::Double, true)?;
    let loss = tape.cross_entropy(trace.logits, labels)?;
    let value = tape.value(loss).data()[0];
    let mut grads: Gradients = tape.backward(loss)?;
    let grads = trace.params.iter().map(|&v| grads.take(v)).collect();
    Ok((value, grads))
}

/// Mean cross-entropy of a batch without gradient bookkeeping.
pub fn loss(params: &NaimParameters, batch: Batch<'_>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let trace = record_forward(&mut tape, params, batch, AttentionKind::Double, false)?;
    let loss = tape.cross_entropy(trace.logits, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Logits for `batch`, `[n, C]` row-major.
pub fn logits(params: &NaimParameters, batch: Batch<'_>, kind: AttentionKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let trace = record_forward(&mut tape, params, batch, kind, false)?;
    Ok(tape.value(trace.logits).clone())
}

/// Class probabilities, `[n, C]` row-major.
pub fn predict_proba_batch(params: &NaimParameters, batch: Batch<'_>) -> Result<Tensor> {
    let mut out = logits(params, batch, AttentionKind::Double)?;
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(t: &mut Tensor) {
    let c = t.cols();
    let open = vec![false; c];
    for r in 0..t.rows() {
        let row = t.row(r).to_vec();
        crate::tensor::kernels::masked_softmax_row(&row, &open, t.row_mut(r));
    }
}
