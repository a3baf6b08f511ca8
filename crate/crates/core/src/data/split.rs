use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fraction of each fold's training portion carved out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

fn by_class(labels: &[usize], indices: impl IntoIterator<Item = usize>) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut groups = vec![Vec::new(); n_classes];
    for i in indices {
        groups[labels[i]].push(i);
    }
    groups
}

/// Stratified k-fold plan. Each class is shuffled and dealt round-robin
/// to the folds, continuing where the previous class stopped so fold
/// sizes differ by at most one. Within each fold, a stratified
/// [`VALIDATION_FRACTION`] of the training portion becomes validation.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = by_class(labels, 0..labels.len());
    for (c, members) in classes.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::Split(format!("class {c} has {} members, fewer than {k} folds", members.len())));
        }
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut next = 0;
    for members in &classes {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % k;
            next += 1;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for members in by_class(labels, (0..labels.len()).filter(|&i| assignment[i] != f)) {
            let mut members = members;
            members.shuffle(&mut rng);
            let n_val = (members.len() as f64 * VALIDATION_FRACTION).round() as usize;
            validation.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        validation.sort_unstable();
        folds.push(Fold { train, validation, test });
    }
    Ok(FoldPlan { k, seed, folds })
}
