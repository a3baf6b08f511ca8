//! Single-sample views of the network, convenient for inspection and
//! tests. Training and scoring use the batched path in `forward`.

use super::config::TokenKind;
use super::forward::{
    attention_mask, embedding_picks, logits, record_attention, record_encoder_layer, softmax_in_place,
    AttentionKind, Batch,
};
use super::params::NaimParameters;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

fn check_feature(params: &NaimParameters, i: usize) -> Result<TokenKind> {
    params
        .tokens()
        .get(i)
        .copied()
        .ok_or_else(|| Error::Index(format!("feature {i} of {}", params.tokens().len())))
}

fn bias_row(params: &NaimParameters, i: usize) -> Option<&[f64]> {
    params.index().embedding_bias.map(|b| params.tensors()[b].row(i))
}

fn with_bias(mut row: Vec<f64>, bias: Option<&[f64]>) -> Vec<f64> {
    if let Some(b) = bias {
        row.iter_mut().zip(b).for_each(|(r, b)| *r += b);
    }
    row
}

/// Embedding of categorical feature `i`; `None` selects the padding row.
pub fn embed_categorical(params: &NaimParameters, i: usize, code: Option<usize>) -> Result<Vec<f64>> {
    let TokenKind::Categorical(k) = check_feature(params, i)? else {
        return Err(Error::Index(format!("feature {i} is not categorical")));
    };
    let row = match code {
        Some(c) if c >= k => return Err(Error::Index(format!("code {c} for {k} categories"))),
        Some(c) => c,
        None => k,
    };
    let table = &params.tensors()[params.index().tables[i]];
    Ok(with_bias(table.row(row).to_vec(), bias_row(params, i)))
}

/// Embedding of numerical feature `i`: the present row scaled by `value`,
/// or the padding row when `present` is false.
pub fn embed_numerical(params: &NaimParameters, i: usize, value: f64, present: bool) -> Result<Vec<f64>> {
    let TokenKind::Numerical = check_feature(params, i)? else {
        return Err(Error::Index(format!("feature {i} is not numerical")));
    };
    let table = &params.tensors()[params.index().tables[i]];
    let row = if present {
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite value for feature {i}")));
        }
        table.row(super::config::NUM_PRESENT_ROW).iter().map(|w| value * w).collect()
    } else {
        table.row(super::config::NUM_MISSING_ROW).to_vec()
    };
    Ok(with_bias(row, bias_row(params, i)))
}

/// `[m, d_e]` token embeddings of one sample.
pub fn embed_sample(params: &NaimParameters, values: &[f64], present: &[bool]) -> Result<Tensor> {
    let batch = Batch { values, present, n: 1 };
    let picks = embedding_picks(params.tokens(), batch)?;
    let mut tape = Tape::new();
    let tables = params
        .index()
        .tables
        .iter()
        .map(|&i| tape.constant(params.tensors()[i].clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut x = tape.gather_rows(&tables, &picks)?;
    if let Some(b) = params.index().embedding_bias {
        let b = tape.constant(params.tensors()[b].clone())?;
        x = tape.add(x, b)?;
    }
    Ok(tape.value(x).clone())
}

fn single_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    present: &[bool],
    kind: AttentionKind,
) -> Result<(Tensor, Tensor)> {
    let m = present.len();
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape().len() != 2 || t.shape()[0] != m {
            return Err(Error::shape("attention", format!("{name} {:?} for {m} tokens", t.shape())));
        }
    }
    let (dh, dv) = (q.cols(), v.cols());
    if k.cols() != dh {
        return Err(Error::shape("attention", format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    let mut tape = Tape::new();
    let as3 = |t: &Tensor| t.clone().reshape([1, m, t.cols()]);
    let q = tape.constant(as3(q)?)?;
    let k = tape.constant(as3(k)?)?;
    let v = tape.constant(as3(v)?)?;
    let blocked = attention_mask(present, 1, m, 1);
    let out = record_attention(&mut tape, q, k, v, &blocked, dh, kind)?;
    let a = tape.attention_weights(out).expect("attention node").clone().reshape([m, m])?;
    let out = tape.value(out).clone().reshape([m, dv])?;
    Ok((out, a))
}

/// Row-and-column masked attention on `m x d_h` inputs. Returns the
/// output and the attention matrix.
pub fn double_masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, present: &[bool]) -> Result<(Tensor, Tensor)> {
    single_head_attention(q, k, v, present, AttentionKind::Double)
}

/// Column-only masked attention: the baseline in which missing features
/// still receive a weighted mix of present ones.
pub fn classic_masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, present: &[bool]) -> Result<(Tensor, Tensor)> {
    single_head_attention(q, k, v, present, AttentionKind::Classic)
}

/// Encoder layer `layer` applied to `x: [m, d_e]`.
pub fn encoder_layer(params: &NaimParameters, layer: usize, x: &Tensor, present: &[bool]) -> Result<Tensor> {
    let idx = params
        .index()
        .layers
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} of {}", params.index().layers.len())))?;
    let m = present.len();
    let cfg = params.config();
    if x.shape() != [m, cfg.d_e] {
        return Err(Error::shape("encoder_layer", format!("x {:?} for {m} tokens", x.shape())));
    }
    let mut tape = Tape::new();
    let vars = params
        .tensors()
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let xv = tape.constant(x.clone())?;
    let blocked = attention_mask(present, 1, m, cfg.heads);
    let (out, _) = record_encoder_layer(&mut tape, &vars, idx, cfg, xv, m, &blocked, AttentionKind::Double)?;
    Ok(tape.value(out).clone())
}

/// Logits of one sample.
pub fn forward(params: &NaimParameters, values: &[f64], present: &[bool]) -> Result<Vec<f64>> {
    let batch = Batch { values, present, n: 1 };
    Ok(logits(params, batch, AttentionKind::Double)?.into_data())
}

/// Class probabilities of one sample.
pub fn predict_proba(params: &NaimParameters, values: &[f64], present: &[bool]) -> Result<Vec<f64>> {
    let batch = Batch { values, present, n: 1 };
    let mut l = logits(params, batch, AttentionKind::Double)?;
    softmax_in_place(&mut l);
    Ok(l.into_data())
}
