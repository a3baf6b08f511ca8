use rand::Rng;

use super::config::{NaimConfig, TokenKind};
use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
    pub bo: usize,
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
}

/// Positions of every named array inside [`NaimParameters::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    pub tables: Vec<usize>,
    pub embedding_bias: Option<usize>,
    pub layers: Vec<LayerIndex>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// All trainable arrays of a NAIM model plus their names and frozen rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NaimParameters {
    config: NaimConfig,
    tokens: Vec<TokenKind>,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<Vec<usize>>,
    index: ParamIndex,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<Vec<usize>>,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor, frozen: Vec<usize>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.frozen.push(frozen);
        self.tensors.len() - 1
    }
}

impl NaimParameters {
    /// Glorot-uniform weights, zero biases, unit norm gains. Padding rows
    /// of the lookup tables are zero and frozen.
    pub fn init<R: Rng + ?Sized>(config: &NaimConfig, tokens: &[TokenKind], rng: &mut R) -> Result<Self> {
        let mut shapes = Vec::new();
        Self::visit(config, tokens, |name, shape, _| {
            shapes.push((name, shape));
            shapes.len() - 1
        })?;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            tensors.push(init_tensor(name, shape, rng)?);
        }
        Self::from_tensors(config, tokens, tensors)
    }

    /// Wraps existing arrays, which must match the layout of `init` in
    /// order and shape. Frozen rows are forced to zero.
    pub fn from_tensors(config: &NaimConfig, tokens: &[TokenKind], tensors: Vec<Tensor>) -> Result<Self> {
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), frozen: Vec::new() };
        let mut supplied = tensors.into_iter();
        let mut err = None;
        let index = Self::visit(config, tokens, |name, shape, frozen| {
            let t = match supplied.next() {
                Some(t) if t.shape() == shape.as_slice() => t,
                Some(t) => {
                    err.get_or_insert(Error::Checkpoint(format!(
                        "{name}: expected shape {shape:?}, got {:?}",
                        t.shape()
                    )));
                    Tensor::zeros(shape)
                }
                None => {
                    err.get_or_insert(Error::Checkpoint(format!("{name}: array missing")));
                    Tensor::zeros(shape)
                }
            };
            b.add(name, t, frozen)
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        if supplied.next().is_some() {
            return Err(Error::Checkpoint("more arrays than the model layout".into()));
        }
        let mut p = Self {
            config: config.clone(),
            tokens: tokens.to_vec(),
            names: b.names,
            tensors: b.tensors,
            frozen: b.frozen,
            index,
        };
        p.zero_frozen();
        Ok(p)
    }

    /// Walks the parameter layout in registration order, calling
    /// `f(name, shape, frozen_rows)` and collecting the returned indices.
    fn visit(
        config: &NaimConfig,
        tokens: &[TokenKind],
        mut f: impl FnMut(String, Vec<usize>, Vec<usize>) -> usize,
    ) -> Result<ParamIndex> {
        config.validate()?;
        if tokens.is_empty() {
            return Err(Error::Config("model needs at least one feature".into()));
        }
        let (d, m, h, dh) = (config.d_e, tokens.len(), config.heads, config.head_dim());
        let tables = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| f(format!("embed.{i}"), vec![t.table_rows(), d], vec![t.padding_row()]))
            .collect();
        let embedding_bias = config
            .embedding_bias
            .then(|| f("embed.bias".into(), vec![m, d], vec![]));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut per_head = |which: &str| -> Vec<usize> {
                (0..h).map(|k| f(format!("layer{l}.{which}.{k}"), vec![d, dh], vec![])).collect()
            };
            let wq = per_head("wq");
            let wk = per_head("wk");
            let wv = per_head("wv");
            layers.push(LayerIndex {
                wq,
                wk,
                wv,
                wo: f(format!("layer{l}.wo"), vec![h * dh, d], vec![]),
                bo: f(format!("layer{l}.bo"), vec![d], vec![]),
                norm1_gain: f(format!("layer{l}.norm1.gain"), vec![d], vec![]),
                norm1_bias: f(format!("layer{l}.norm1.bias"), vec![d], vec![]),
                ff1_w: f(format!("layer{l}.ff1.w"), vec![d, config.ff_dim], vec![]),
                ff1_b: f(format!("layer{l}.ff1.b"), vec![config.ff_dim], vec![]),
                ff2_w: f(format!("layer{l}.ff2.w"), vec![config.ff_dim, d], vec![]),
                ff2_b: f(format!("layer{l}.ff2.b"), vec![d], vec![]),
                norm2_gain: f(format!("layer{l}.norm2.gain"), vec![d], vec![]),
                norm2_bias: f(format!("layer{l}.norm2.bias"), vec![d], vec![]),
            });
        }
        Ok(ParamIndex {
            tables,
            embedding_bias,
            layers,
            final_gain: f("final_norm.gain".into(), vec![d], vec![]),
            final_bias: f("final_norm.bias".into(), vec![d], vec![]),
            head_w: f("head.w".into(), vec![m * d, config.n_classes], vec![]),
            head_b: f("head.b".into(), vec![config.n_classes], vec![]),
        })
    }

    fn zero_frozen(&mut self) {
        for (t, rows) in self.tensors.iter_mut().zip(&self.frozen) {
            for &r in rows {
                t.row_mut(r).fill(0.0);
            }
        }
    }

    pub fn config(&self) -> &NaimConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[TokenKind] {
        &self.tokens
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable access for optimizers. Frozen rows must be left alone; see
    /// [`NaimParameters::frozen_rows`].
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn frozen_rows(&self) -> &[Vec<usize>] {
        &self.frozen
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let is_gain = name.ends_with(".gain");
    let is_bias = shape.len() == 1 || name.ends_with(".bias");
    Ok(if is_gain {
        Tensor::filled(shape.to_vec(), 1.0)
    } else if is_bias {
        Tensor::zeros(shape.to_vec())
    } else {
        glorot_uniform(shape.to_vec(), shape[0], shape[1], rng)?
    })
}
