//! The NAIM network.
//!
//! Every feature is a token. A feature's lookup table has one extra row
//! that is frozen at zero and selected whenever the cell is missing
//! (for numerical features the other row is scaled by the value). The
//! encoder masks missing tokens out of attention in both directions: their
//! columns are excluded from every softmax and their rows are zeroed
//! afterwards, so raw values under missing cells never reach the logits.

pub mod checkpoint;
mod config;
mod forward;
mod params;
mod sample;

pub use config::{NaimConfig, TokenKind, NUM_MISSING_ROW, NUM_PRESENT_ROW};
pub use forward::{
    embedding_picks, logits, loss, loss_and_gradients, predict_proba_batch, record_forward, AttentionKind, Batch,
    ForwardTrace,
};
pub use params::{LayerIndex, NaimParameters, ParamIndex};
pub use sample::{
    classic_masked_attention, double_masked_attention, embed_categorical, embed_numerical, embed_sample,
    encoder_layer, forward, predict_proba,
};
