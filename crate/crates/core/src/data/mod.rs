//! Loading, preprocessing and splitting tabular data.
//!
//! A CSV file is read against a [`SchemaSpec`] into a [`RawDataset`] that
//! keeps categorical labels as strings. A [`Preprocessor`] fitted on a
//! training split turns raw rows into a [`TabularDataset`]: numerical
//! features min-max scaled to `[0, 1]`, categorical features coded
//! `0..k`, and a presence grid recording which cells were observed.

mod dataset;
mod preprocess;
mod raw;
mod schema;
mod split;

pub use dataset::TabularDataset;
pub use preprocess::{FeatureTransform, Preprocessor, DEGENERATE_VALUE};
pub use raw::{load_csv, RawDataset, RawValue, MISSING_TOKENS};
pub use schema::{ColumnKind, ColumnSpec, Feature, FeatureKind, FeatureSchema, LabelSpec, SchemaSpec};
pub use split::{stratified_kfold, Fold, FoldPlan, VALIDATION_FRACTION};
