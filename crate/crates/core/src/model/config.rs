use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureSchema};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NaimConfig {
    /// Embedding width `d_e`.
    pub d_e: usize,
    /// Encoder layers `L`.
    pub layers: usize,
    /// Attention heads `h`; `d_e` must be a multiple.
    pub heads: usize,
    /// Hidden width of the position-wise feed-forward block.
    pub ff_dim: usize,
    /// Per-feature embedding bias `b_i`.
    pub embedding_bias: bool,
    pub n_classes: usize,
    pub norm_eps: f64,
}

impl Default for NaimConfig {
    fn default() -> Self {
        Self {
            d_e: 6,
            layers: 6,
            heads: 3,
            ff_dim: 1000,
            embedding_bias: false,
            n_classes: 2,
            norm_eps: 1e-5,
        }
    }
}

impl NaimConfig {
    pub fn head_dim(&self) -> usize {
        self.d_e / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_e.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_e = {} is not divisible by {} heads",
                self.d_e, self.heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config(format!("norm_eps must be > 0, got {}", self.norm_eps)));
        }
        Ok(())
    }
}

/// How a feature enters the model as a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Numerical,
    /// Category count `k`; the padding code is `k`.
    Categorical(usize),
}

impl TokenKind {
    pub fn from_schema(schema: &FeatureSchema) -> Vec<TokenKind> {
        schema
            .features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Numerical => TokenKind::Numerical,
                FeatureKind::Categorical { categories } => TokenKind::Categorical(categories.len()),
            })
            .collect()
    }

    /// Rows in the feature's lookup table, padding row included.
    pub fn table_rows(self) -> usize {
        match self {
            TokenKind::Numerical => 2,
            TokenKind::Categorical(k) => k + 1,
        }
    }

    /// The row that missing cells map to.
    pub fn padding_row(self) -> usize {
        match self {
            TokenKind::Numerical => NUM_MISSING_ROW,
            TokenKind::Categorical(k) => k,
        }
    }
}

/// Row of a numerical table scaled by the observed value.
pub const NUM_PRESENT_ROW: usize = 0;
/// Frozen zero row of a numerical table.
pub const NUM_MISSING_ROW: usize = 1;
