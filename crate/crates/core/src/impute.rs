//! Imputation baselines: per-column mean/mode and masked-distance KNN.
//!
//! Both fill only the missing cells and return a dataset whose present grid
//! is all true. States are fitted on training data and never mutated.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, TabularDataset};
use crate::error::{Error, Result};

/// Fill value for a numerical column with no observed training value.
pub const EMPTY_NUMERICAL_FILL: f64 = 0.5;

/// Default neighbour count.
pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanImputerState {
    /// One fill value per feature: a mean, or a categorical code as `f64`.
    pub fill: Vec<f64>,
}

/// Mode of `codes` over `0..cardinality`; ties go to the lowest code and an
/// empty input gives code 0.
fn mode(codes: impl Iterator<Item = usize>, cardinality: usize) -> usize {
    let mut counts = vec![0usize; cardinality.max(1)];
    for c in codes {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn fit_mean(train: &TabularDataset) -> MeanImputerState {
    let m = train.n_features();
    let fill = (0..m)
        .map(|j| {
            let observed = (0..train.n_samples())
                .filter(|&i| train.row_present(i)[j])
                .map(|i| train.row_values(i)[j]);
            match &train.schema().features[j].kind {
                FeatureKind::Numerical => mean(observed).unwrap_or(EMPTY_NUMERICAL_FILL),
                FeatureKind::Categorical { categories } => mode(observed.map(|v| v as usize), categories.len()) as f64,
            }
        })
        .collect();
    MeanImputerState { fill }
}

pub fn apply_mean(state: &MeanImputerState, d: &TabularDataset) -> Result<TabularDataset> {
    check_width("mean imputer", state.fill.len(), d)?;
    let m = d.n_features();
    let mut values = d.values().to_vec();
    for (idx, &p) in d.present().iter().enumerate() {
        if !p {
            values[idx] = state.fill[idx % m];
        }
    }
    d.with_values(values)?.with_present(vec![true; d.present().len()])
}

fn check_width(what: &str, expected: usize, d: &TabularDataset) -> Result<()> {
    if expected == d.n_features() {
        Ok(())
    } else {
        Err(Error::shape("impute", format!("{what} fitted on {expected} features, data has {}", d.n_features())))
    }
}

#[derive(Clone, Debug)]
pub struct KnnImputerState {
    train: TabularDataset,
    k: usize,
    fallback: MeanImputerState,
}

impl KnnImputerState {
    pub fn k(&self) -> usize {
        self.k
    }
}

pub fn fit_knn(train: &TabularDataset, k: usize) -> Result<KnnImputerState> {
    if k == 0 || k > train.n_samples() {
        return Err(Error::Contract(format!(
            "knn imputer needs 1 <= k <= {} training rows, got k = {k}",
            train.n_samples()
        )));
    }
    Ok(KnnImputerState { train: train.clone(), k, fallback: fit_mean(train) })
}

/// Root mean squared difference over the coordinates observed in both rows;
/// categorical coordinates contribute 0 when equal and 1 otherwise. `None`
/// when the rows share no observed coordinate.
pub fn masked_distance(
    kinds: &[FeatureKind],
    a: &[f64],
    a_present: &[bool],
    b: &[f64],
    b_present: &[bool],
) -> Option<f64> {
    let (mut sum, mut shared) = (0.0, 0usize);
    for j in 0..kinds.len() {
        if a_present[j] && b_present[j] {
            let diff = match kinds[j] {
                FeatureKind::Numerical => a[j] - b[j],
                FeatureKind::Categorical { .. } => f64::from(u8::from(a[j] != b[j])),
            };
            sum += diff * diff;
            shared += 1;
        }
    }
    (shared > 0).then(|| (sum / shared as f64).sqrt())
}

/// Indices of training rows sorted by distance to the query, ties by index;
/// rows without a shared coordinate are left out.
fn ranked_neighbours(state: &KnnImputerState, kinds: &[FeatureKind], values: &[f64], present: &[bool]) -> Vec<usize> {
    let train = &state.train;
    let mut ranked: Vec<(f64, usize)> = (0..train.n_samples())
        .filter_map(|i| {
            masked_distance(kinds, values, present, train.row_values(i), train.row_present(i)).map(|d| (d, i))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(state.k);
    ranked.into_iter().map(|(_, i)| i).collect()
}

pub fn apply_knn(state: &KnnImputerState, d: &TabularDataset) -> Result<TabularDataset> {
    check_width("knn imputer", state.train.n_features(), d)?;
    let kinds: Vec<FeatureKind> = d.schema().features.iter().map(|f| f.kind.clone()).collect();
    let m = d.n_features();
    let train = &state.train;
    let mut values = d.values().to_vec();
    for i in 0..d.n_samples() {
        let (row, present) = (d.row_values(i), d.row_present(i));
        if present.iter().all(|&p| p) {
            continue;
        }
        let neighbours = ranked_neighbours(state, &kinds, row, present);
        for j in (0..m).filter(|&j| !present[j]) {
            let observed = neighbours
                .iter()
                .filter(|&&n| train.row_present(n)[j])
                .map(|&n| train.row_values(n)[j]);
            let fill = match &kinds[j] {
                FeatureKind::Numerical => mean(observed),
                FeatureKind::Categorical { categories } => {
                    let codes: Vec<usize> = observed.map(|v| v as usize).collect();
                    (!codes.is_empty()).then(|| mode(codes.into_iter(), categories.len()) as f64)
                }
            };
            values[i * m + j] = fill.unwrap_or(state.fallback.fill[j]);
        }
    }
    d.with_values(values)?.with_present(vec![true; d.present().len()])
}
