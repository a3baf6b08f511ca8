use super::kernels::{axpy, dot, ff_hidden_block, gemm, masked_softmax_row, transpose, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One output row of [`Tape::gather_rows`]: `scale * tables[table][row]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowPick {
    pub table: usize,
    pub row: usize,
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    FeedForward { x: Var, w1: Var, b1: Var, w2: Var, b2: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { x: Var, y: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    Attention { q: Var, k: Var, v: Var, weights: Tensor, scale: f64 },
    ZeroRows { x: Var, rows: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Gather { tables: Vec<Var>, picks: Vec<RowPick> },
    SplitHeads { x: Var, tokens: usize, heads: usize },
    MergeHeads { x: Var, heads: usize },
    ConcatCols { parts: Vec<Var> },
    Reshape { x: Var },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Rows per GEMM block in the fused feed-forward op; bounds the hidden
/// scratch to `FF_BLOCK x ff_dim`.
const FF_BLOCK: usize = 128;

/// Append-only record of a computation. Inputs always precede the nodes
/// that consume them, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // `v * 0` is 0 for finite values and NaN otherwise; the branch-free sum
    // vectorizes where a short-circuiting scan does not.
    let mut acc = [0.0f64; 8];
    let chunks = data.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|v| v * 0.0).sum();
    for c in chunks {
        for l in 0..8 {
            acc[l] += c[l] * 0.0;
        }
    }
    if acc.iter().sum::<f64>() + tail == 0.0 {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        check_finite("param", value.data())?;
        Ok(self.push(Op::Leaf, value, true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        check_finite("constant", value.data())?;
        Ok(self.push(Op::Leaf, value, false))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    /// `a[.., k] · b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.cols() != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), Layout::N, bv.data(), Layout::N, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.record("matmul", Op::MatMul { a, b }, value, &[a, b])
    }

    /// Affine map `x[.., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || xv.shape().is_empty() || xv.cols() != wv.shape()[0] || bv.shape() != [wv.shape()[1]] {
            return Err(Error::shape(
                "linear",
                format!("{:?} x {:?} + {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
        let mut out: Vec<f64> = bv.data().iter().copied().cycle().take(m * n).collect();
        gemm(m, k, n, xv.data(), Layout::N, wv.data(), Layout::N, &mut out, true);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.record("linear", Op::Linear { x, w, b }, value, &[x, w, b])
    }

    /// Position-wise feed-forward block `relu(x · w1 + b1) · w2 + b2` for
    /// `x: [.., d]`, `w1: [d, f]`, `w2: [f, d_out]`. The hidden layer is
    /// never stored; backward recomputes it one row at a time.
    pub fn feed_forward(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let (xv, w1v, b1v, w2v, b2v) = (self.value(x), self.value(w1), self.value(b1), self.value(w2), self.value(b2));
        let d = xv.cols();
        let ok = !xv.shape().is_empty()
            && w1v.shape().len() == 2
            && w1v.shape()[0] == d
            && b1v.shape() == [w1v.shape()[1]]
            && w2v.shape().len() == 2
            && w2v.shape()[0] == w1v.shape()[1]
            && b2v.shape() == [w2v.shape()[1]];
        if !ok {
            return Err(Error::shape(
                "feed_forward",
                format!(
                    "x {:?}, w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    xv.shape(),
                    w1v.shape(),
                    b1v.shape(),
                    w2v.shape(),
                    b2v.shape()
                ),
            ));
        }
        let (f, d_out) = (w1v.shape()[1], w2v.shape()[1]);
        let rows = xv.rows();
        let mut out = vec![0.0; rows * d_out];
        let mut h = vec![0.0; FF_BLOCK.min(rows) * f];
        for r0 in (0..rows).step_by(FF_BLOCK) {
            let nb = FF_BLOCK.min(rows - r0);
            let h = &mut h[..nb * f];
            ff_hidden_block(&xv.data()[r0 * d..(r0 + nb) * d], w1v.data(), b1v.data(), h);
            let ob = &mut out[r0 * d_out..(r0 + nb) * d_out];
            for row in ob.chunks_mut(d_out) {
                row.copy_from_slice(b2v.data());
            }
            gemm(nb, f, d_out, h, Layout::N, w2v.data(), Layout::N, ob, true);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        self.record("feed_forward", Op::FeedForward { x, w1, b1, w2, b2 }, value, &[x, w1, b1, w2, b2])
    }

    /// Batched product over the leading axis: `a[B, m, k] · b[B, k, n]`, or
    /// `a[B, m, k] · b[B, n, k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::shape("batch_matmul", format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let bl = if trans_b { Layout::T } else { Layout::N };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                Layout::N,
                &bv.data()[i * k * n..(i + 1) * k * n],
                bl,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new([batch, m, n], out)?;
        self.record("batch_matmul", Op::BatchMatMul { a, b, trans_b }, value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.record("add", Op::Add { a, b }, value, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.record("mul", Op::Mul { a, b }, value, &[a, b])
    }

    /// `x + y` where `y` is tiled along the leading axes of `x`; `y`'s shape
    /// must equal the trailing axes of `x` (a bias vector, a per-token table).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (xs, ys) = (xv.shape(), yv.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_broadcast", format!("{xs:?} + {ys:?}")));
        }
        let yl = yv.numel();
        let data = xv
            .data()
            .chunks(yl)
            .flat_map(|c| c.iter().zip(yv.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(xs, data)?;
        self.record("add_broadcast", Op::AddBroadcast { x, y }, value, &[x, y])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * factor).collect())?;
        self.record("scale", Op::Scale { x, factor }, value, &[x])
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.record("relu", Op::Relu { x }, value, &[x])
    }

    /// Row-wise softmax with column blocking.
    ///
    /// Rows of `x` (slices of its trailing axis, length `n`) are split into
    /// `blocked.len() / n` contiguous groups of equal size; group `g` uses
    /// `blocked[g*n..(g+1)*n]` as its column mask. Blocked columns come out
    /// as exact zeros and a row whose columns are all blocked is all zeros.
    pub fn softmax_rows(&mut self, x: Var, blocked: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let rows = xv.rows();
        if n == 0 || !blocked.len().is_multiple_of(n) || blocked.is_empty() || !rows.is_multiple_of(blocked.len() / n) {
            return Err(Error::shape(
                "softmax_rows",
                format!("x {:?} with mask of length {}", xv.shape(), blocked.len()),
            ));
        }
        let per_group = rows / (blocked.len() / n);
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let g = r / per_group;
            masked_softmax_row(
                xv.row(r),
                &blocked[g * n..(g + 1) * n],
                &mut out[r * n..(r + 1) * n],
            );
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.record("softmax_rows", Op::SoftmaxRows { x }, value, &[x])
    }

    /// Fused masked scaled dot-product attention over `G` independent groups.
    ///
    /// `q, k: [G, m, d]`, `v: [G, m, dv]`, `blocked: [G * m]`. Group `g`
    /// attends with weights `softmax(scale * q kᵀ)` restricted to the
    /// unblocked columns; when `zero_blocked_rows` is set the rows of blocked
    /// tokens are exact zeros as well. The output is `[G, m, dv]` and the
    /// weights stay available through [`Tape::attention_weights`].
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocked: &[bool],
        scale: f64,
        zero_blocked_rows: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let bad = || {
            Error::shape(
                "masked_attention",
                format!("q {:?} k {:?} v {:?} mask {}", qv.shape(), kv.shape(), vv.shape(), blocked.len()),
            )
        };
        if qv.shape().len() != 3 || qv.shape() != kv.shape() || vv.shape().len() != 3 {
            return Err(bad());
        }
        let (groups, m, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dv = vv.shape()[2];
        if vv.shape()[..2] != qv.shape()[..2] || blocked.len() != groups * m {
            return Err(bad());
        }
        let mut weights = vec![0.0; groups * m * m];
        let mut out = vec![0.0; groups * m * dv];
        let mut scores = vec![0.0; m];
        for g in 0..groups {
            let bl = &blocked[g * m..(g + 1) * m];
            let qg = &qv.data()[g * m * d..(g + 1) * m * d];
            let kt = transpose(&kv.data()[g * m * d..(g + 1) * m * d], m, d);
            let vt = transpose(&vv.data()[g * m * dv..(g + 1) * m * dv], m, dv);
            for i in 0..m {
                if zero_blocked_rows && bl[i] {
                    continue;
                }
                scores.fill(0.0);
                for t in 0..d {
                    axpy(scale * qg[i * d + t], &kt[t * m..(t + 1) * m], &mut scores);
                }
                let row = &mut weights[(g * m + i) * m..(g * m + i + 1) * m];
                masked_softmax_row(&scores, bl, row);
                for t in 0..dv {
                    out[(g * m + i) * dv + t] = dot(row, &vt[t * m..(t + 1) * m]);
                }
            }
        }
        let weights = Tensor::new([groups, m, m], weights)?;
        let value = Tensor::new([groups, m, dv], out)?;
        self.record("masked_attention", Op::Attention { q, k, v, weights, scale }, value, &[q, k, v])
    }

    /// Attention weights `[G, m, m]` of a node made by
    /// [`Tape::masked_attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Writes exact zeros into every trailing-axis row flagged in `rows`.
    pub fn zero_rows(&mut self, x: Var, rows: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if rows.len() != xv.rows() {
            return Err(Error::shape(
                "zero_rows",
                format!("x {:?} has {} rows, mask has {}", xv.shape(), xv.rows(), rows.len()),
            ));
        }
        let mut value = xv.clone();
        for (r, &z) in rows.iter().enumerate() {
            if z {
                value.row_mut(r).fill(0.0);
            }
        }
        let rows = rows.to_vec();
        self.record("zero_rows", Op::ZeroRows { x, rows }, value, &[x])
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.record(
            "layer_norm",
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            value,
            &[x, gain, bias],
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; lv.numel()];
        let no_block = vec![false; c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            masked_softmax_row(row, &no_block, &mut probs[r * c..(r + 1) * c]);
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        let labels = labels.to_vec();
        self.record(
            "cross_entropy",
            Op::CrossEntropy { logits, labels, probs },
            value,
            &[logits],
        )
    }

    /// Stacks `scale * tables[table][row]` for every pick into `[picks, d]`.
    /// All tables must be 2-D with the same width `d`.
    pub fn gather_rows(&mut self, tables: &[Var], picks: &[RowPick]) -> Result<Var> {
        let d = match tables.first() {
            Some(&t) => self.value(t).cols(),
            None => return Err(Error::shape("gather_rows", "no tables")),
        };
        for &t in tables {
            let tv = self.value(t);
            if tv.shape().len() != 2 || tv.cols() != d {
                return Err(Error::shape("gather_rows", format!("table {:?}, width {d}", tv.shape())));
            }
        }
        let mut out = vec![0.0; picks.len() * d];
        for (i, p) in picks.iter().enumerate() {
            let table = tables
                .get(p.table)
                .map(|&t| self.value(t))
                .ok_or_else(|| Error::Index(format!("table {} of {}", p.table, tables.len())))?;
            if p.row >= table.rows() {
                return Err(Error::Index(format!(
                    "row {} of table {} with {} rows",
                    p.row,
                    p.table,
                    table.rows()
                )));
            }
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(table.row(p.row)) {
                *o = p.scale * v;
            }
        }
        let value = Tensor::new([picks.len(), d], out)?;
        let op = Op::Gather { tables: tables.to_vec(), picks: picks.to_vec() };
        self.record("gather_rows", op, value, tables)
    }

    /// `[B*tokens, heads*dh] -> [B*heads, tokens, dh]`.
    pub fn split_heads(&mut self, x: Var, tokens: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.cols();
        if tokens == 0 || heads == 0 || !width.is_multiple_of(heads) || !xv.rows().is_multiple_of(tokens) {
            return Err(Error::shape(
                "split_heads",
                format!("{:?} into {heads} heads of {tokens} tokens", xv.shape()),
            ));
        }
        let dh = width / heads;
        let batch = xv.rows() / tokens;
        let mut out = vec![0.0; xv.numel()];
        for b in 0..batch {
            for t in 0..tokens {
                let src = xv.row(b * tokens + t);
                for h in 0..heads {
                    let dst = ((b * heads + h) * tokens + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let value = Tensor::new([batch * heads, tokens, dh], out)?;
        self.record("split_heads", Op::SplitHeads { x, tokens, heads }, value, &[x])
    }

    /// Inverse of [`Tape::split_heads`]: `[B*heads, tokens, dh] -> [B*tokens, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || heads == 0 || !xv.shape()[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", format!("{:?} with {heads} heads", xv.shape())));
        }
        let (bh, tokens, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let batch = bh / heads;
        let width = heads * dh;
        let mut out = vec![0.0; xv.numel()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..tokens {
                    let src = ((b * heads + h) * tokens + t) * dh;
                    let dst = (b * tokens + t) * width + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::new([batch * tokens, width], out)?;
        self.record("merge_heads", Op::MergeHeads { x, heads }, value, &[x])
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != rows {
                return Err(Error::shape("concat_cols", format!("part {:?}, rows {rows}", pv.shape())));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let value = Tensor::new([rows, total], out)?;
        self.record("concat_cols", Op::ConcatCols { parts: parts.to_vec() }, value, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.record("reshape", Op::Reshape { x }, value, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", Op::Sum { x }, value, &[x])
    }

    /// Reverse sweep from a scalar `root`. Nodes that do not influence
    /// `root` get no gradient ([`Gradients::wrt`] reports zeros for them).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("root {root:?} is not on this tape")));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    gemm(m, n, k, g, Layout::N, bv.data(), Layout::T, da, true);
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    gemm(k, m, n, av.data(), Layout::T, g, Layout::N, db, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    gemm(m, n, k, g, Layout::N, wv.data(), Layout::T, dx, true);
                }
                if let Some(dw) = grad_slot(grads, nodes, *w) {
                    gemm(k, m, n, xv.data(), Layout::T, g, Layout::N, dw, true);
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::FeedForward { x, w1, b1, w2, b2 } => {
                let (xv, w1v, b1v, w2v) = (&nodes[x.0].value, &nodes[w1.0].value, &nodes[b1.0].value, &nodes[w2.0].value);
                let (d, f, d_out) = (xv.cols(), w1v.shape()[1], w2v.shape()[1]);
                let rows = xv.rows();
                let need = |v: &Var| nodes[v.0].requires_grad;
                let mut dx = need(x).then(|| vec![0.0; xv.numel()]);
                let mut dw1 = need(w1).then(|| vec![0.0; d * f]);
                let mut db1 = need(b1).then(|| vec![0.0; f]);
                let mut dw2 = need(w2).then(|| vec![0.0; f * d_out]);
                let mut db2 = need(b2).then(|| vec![0.0; d_out]);
                let inner = dx.is_some() || dw1.is_some() || db1.is_some();
                let mut h = vec![0.0; FF_BLOCK.min(rows) * f];
                let mut dh = vec![0.0; if inner { FF_BLOCK.min(rows) * f } else { 0 }];
                for r0 in (0..rows).step_by(FF_BLOCK) {
                    let nb = FF_BLOCK.min(rows - r0);
                    let xb = &xv.data()[r0 * d..(r0 + nb) * d];
                    let gb = &g[r0 * d_out..(r0 + nb) * d_out];
                    let h = &mut h[..nb * f];
                    ff_hidden_block(xb, w1v.data(), b1v.data(), h);
                    if let Some(dw2) = dw2.as_mut() {
                        gemm(f, nb, d_out, h, Layout::T, gb, Layout::N, dw2, true);
                    }
                    if let Some(db2) = db2.as_mut() {
                        for gr in gb.chunks(d_out) {
                            axpy(1.0, gr, db2);
                        }
                    }
                    if !inner {
                        continue;
                    }
                    let dh = &mut dh[..nb * f];
                    gemm(nb, d_out, f, gb, Layout::N, w2v.data(), Layout::T, dh, false);
                    for (g, &a) in dh.iter_mut().zip(h.iter()) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    if let Some(dw1) = dw1.as_mut() {
                        gemm(d, nb, f, xb, Layout::T, dh, Layout::N, dw1, true);
                    }
                    if let Some(db1) = db1.as_mut() {
                        for row in dh.chunks(f) {
                            axpy(1.0, row, db1);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(nb, f, d, dh, Layout::N, w1v.data(), Layout::T, &mut dx[r0 * d..(r0 + nb) * d], false);
                    }
                }
                for (v, local) in [(x, dx), (w1, dw1), (b1, db1), (w2, dw2), (b2, db2)] {
                    if let (Some(local), Some(slot)) = (local, grad_slot(grads, nodes, *v)) {
                        slot.iter_mut().zip(&local).for_each(|(s, l)| *s += l);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (sa, sb, so) = (m * k, k * n, m * n);
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    let bl = if *trans_b { Layout::N } else { Layout::T };
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * so..(t + 1) * so],
                            Layout::N,
                            &bv.data()[t * sb..(t + 1) * sb],
                            bl,
                            &mut da[t * sa..(t + 1) * sa],
                            true,
                        );
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    for t in 0..batch {
                        let (gt, at) = (&g[t * so..(t + 1) * so], &av.data()[t * sa..(t + 1) * sa]);
                        let dbt = &mut db[t * sb..(t + 1) * sb];
                        if *trans_b {
                            gemm(n, m, k, gt, Layout::T, at, Layout::N, dbt, true);
                        } else {
                            gemm(k, m, n, at, Layout::T, gt, Layout::N, dbt, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = grad_slot(grads, nodes, *v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBroadcast { x, y } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(dy) = grad_slot(grads, nodes, *y) {
                    let yl = dy.len();
                    for chunk in g.chunks(yl) {
                        dy.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
                }
            }
            Op::Relu { x } => {
                let out = node.value.data();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for ((d, g), &y) in dx.iter_mut().zip(g).zip(out) {
                        if y > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                // Blocked entries have y = 0, so the Jacobian-vector product
                // leaves them untouched without consulting the mask.
                let y = &node.value;
                let n = y.cols();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, weights, scale } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (groups, m, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let dv = vv.shape()[2];
                let need = |x: &Var| nodes[x.0].requires_grad;
                let (nq, nk, nv) = (need(q), need(k), need(v));
                let mut dq = vec![0.0; if nq { qv.numel() } else { 0 }];
                let mut dk = vec![0.0; if nk { kv.numel() } else { 0 }];
                let mut dvv = vec![0.0; if nv { vv.numel() } else { 0 }];
                let mut da = vec![0.0; m];
                let mut ds = vec![0.0; m];
                let mut dkt = vec![0.0; d * m];
                let mut dvt = vec![0.0; dv * m];
                for grp in 0..groups {
                    let (qo, vo) = (grp * m * d, grp * m * dv);
                    let qg = &qv.data()[qo..qo + m * d];
                    let kt = transpose(&kv.data()[qo..qo + m * d], m, d);
                    let vt = transpose(&vv.data()[vo..vo + m * dv], m, dv);
                    dkt.fill(0.0);
                    dvt.fill(0.0);
                    for i in 0..m {
                        let row = &weights.data()[(grp * m + i) * m..(grp * m + i + 1) * m];
                        if row.iter().all(|&a| a == 0.0) {
                            continue;
                        }
                        let gi = &g[vo + i * dv..vo + (i + 1) * dv];
                        da.fill(0.0);
                        for t in 0..dv {
                            axpy(gi[t], &vt[t * m..(t + 1) * m], &mut da);
                            if nv {
                                axpy(gi[t], row, &mut dvt[t * m..(t + 1) * m]);
                            }
                        }
                        if !nq && !nk {
                            continue;
                        }
                        let s = dot(row, &da);
                        for ((o, &a), &x) in ds.iter_mut().zip(row).zip(&da) {
                            *o = scale * a * (x - s);
                        }
                        for t in 0..d {
                            if nq {
                                dq[qo + i * d + t] += dot(&ds, &kt[t * m..(t + 1) * m]);
                            }
                            if nk {
                                axpy(qg[i * d + t], &ds, &mut dkt[t * m..(t + 1) * m]);
                            }
                        }
                    }
                    if nk {
                        for t in 0..d {
                            for j in 0..m {
                                dk[qo + j * d + t] += dkt[t * m + j];
                            }
                        }
                    }
                    if nv {
                        for t in 0..dv {
                            for j in 0..m {
                                dvv[vo + j * dv + t] += dvt[t * m + j];
                            }
                        }
                    }
                }
                for (x, local, used) in [(q, dq, nq), (k, dk, nk), (v, dvv, nv)] {
                    if let (true, Some(slot)) = (used, grad_slot(grads, nodes, *x)) {
                        slot.iter_mut().zip(&local).for_each(|(s, l)| *s += l);
                    }
                }
            }
            Op::ZeroRows { x, rows } => {
                let n = node.value.cols();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for (r, &z) in rows.iter().enumerate() {
                        if !z {
                            for j in r * n..(r + 1) * n {
                                dx[j] += g[j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = nodes[gain.0].value.data();
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(dg) = grad_slot(grads, nodes, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[logits.0].value.cols();
                let w = g[0] / labels.len() as f64;
                if let Some(dl) = grad_slot(grads, nodes, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            dl[r * c + j] += w * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::Gather { tables, picks } => {
                let d = node.value.cols();
                for (t, &table) in tables.iter().enumerate() {
                    if let Some(dt) = grad_slot(grads, nodes, table) {
                        for (i, p) in picks.iter().enumerate().filter(|(_, p)| p.table == t) {
                            for j in 0..d {
                                dt[p.row * d + j] += p.scale * g[i * d + j];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, tokens, heads } => {
                let (tokens, heads) = (*tokens, *heads);
                let dh = node.value.shape()[2];
                let width = heads * dh;
                let batch = node.value.shape()[0] / heads;
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let src = ((b * heads + h) * tokens + t) * dh;
                                let dst = (b * tokens + t) * width + h * dh;
                                for j in 0..dh {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let heads = *heads;
                let xs = nodes[x.0].value.shape();
                let (bh, tokens, dh) = (xs[0], xs[1], xs[2]);
                let width = heads * dh;
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    for b in 0..bh / heads {
                        for h in 0..heads {
                            for t in 0..tokens {
                                let src = (b * tokens + t) * width + h * dh;
                                let dst = ((b * heads + h) * tokens + t) * dh;
                                for j in 0..dh {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(dp) = grad_slot(grads, nodes, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
