use serde::{Deserialize, Serialize};

use super::dataset::TabularDataset;
use super::raw::{RawDataset, RawValue};
use super::schema::{ColumnKind, Feature, FeatureKind, FeatureSchema};
use crate::error::{Error, Result};

/// Value given to every cell of a numerical feature whose fitted range is
/// degenerate (`min == max`, or no observed values).
pub const DEGENERATE_VALUE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureTransform {
    /// `None` marks a degenerate range.
    MinMax(Option<(f64, f64)>),
    Codes(Vec<String>),
}

/// Min-max scaling and categorical coding fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub names: Vec<String>,
    pub transforms: Vec<FeatureTransform>,
    pub label: String,
    pub classes: Vec<String>,
}

impl Preprocessor {
    /// Statistics come from observed cells only. Categories are coded in
    /// lexicographic label order.
    pub fn fit(train: &RawDataset) -> Self {
        let transforms = train
            .spec
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| match f.kind {
                ColumnKind::Numerical => {
                    let observed = train.rows.iter().filter_map(|r| match r[j] {
                        RawValue::Num(v) => Some(v),
                        _ => None,
                    });
                    let (lo, hi) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                    FeatureTransform::MinMax((lo < hi).then_some((lo, hi)))
                }
                ColumnKind::Categorical => {
                    let mut labels: Vec<String> = train
                        .rows
                        .iter()
                        .filter_map(|r| match &r[j] {
                            RawValue::Cat(s) => Some(s.clone()),
                            _ => None,
                        })
                        .collect();
                    labels.sort();
                    labels.dedup();
                    FeatureTransform::Codes(labels)
                }
            })
            .collect();
        Self {
            names: train.spec.features.iter().map(|f| f.name.clone()).collect(),
            transforms,
            label: train.spec.label.name.clone().unwrap_or_else(|| "label".into()),
            classes: train.classes.clone(),
        }
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            features: self
                .names
                .iter()
                .zip(&self.transforms)
                .map(|(name, t)| Feature {
                    name: name.clone(),
                    kind: match t {
                        FeatureTransform::MinMax(_) => FeatureKind::Numerical,
                        FeatureTransform::Codes(c) => FeatureKind::Categorical { categories: c.clone() },
                    },
                })
                .collect(),
            label: self.label.clone(),
            classes: self.classes.clone(),
        }
    }

    /// Scales numerical cells into `[0, 1]` (clamping out-of-range values)
    /// and codes categorical cells; unseen categories become missing.
    pub fn apply(&self, data: &RawDataset) -> Result<TabularDataset> {
        let names: Vec<&str> = data.spec.features.iter().map(|f| f.name.as_str()).collect();
        if names != self.names.iter().map(String::as_str).collect::<Vec<_>>() || data.classes != self.classes {
            return Err(Error::Schema("dataset does not match the fitted preprocessor".into()));
        }
        let m = self.names.len();
        let n = data.len();
        let mut values = vec![0.0; n * m];
        let mut present = vec![false; n * m];
        for (i, row) in data.rows.iter().enumerate() {
            for (j, (cell, t)) in row.iter().zip(&self.transforms).enumerate() {
                let (v, p) = match (cell, t) {
                    (RawValue::Missing, _) => (0.0, false),
                    (RawValue::Num(x), FeatureTransform::MinMax(range)) => match range {
                        Some((lo, hi)) => (((x - lo) / (hi - lo)).clamp(0.0, 1.0), true),
                        None => (DEGENERATE_VALUE, true),
                    },
                    (RawValue::Cat(s), FeatureTransform::Codes(codes)) => {
                        match codes.binary_search(s) {
                            Ok(c) => (c as f64, true),
                            Err(_) => (0.0, false),
                        }
                    }
                    _ => {
                        return Err(Error::Schema(format!(
                            "cell kind does not match feature {:?}",
                            self.names[j]
                        )))
                    }
                };
                values[i * m + j] = v;
                present[i * m + j] = p;
            }
        }
        TabularDataset::new(self.schema(), values, present, data.labels.clone())
    }
}
