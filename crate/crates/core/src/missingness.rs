//! MCAR missingness injection and the per-sample masking regularizer.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Probability that [`augment_sample`] masks anything.
pub const AUGMENT_PROBABILITY: f64 = 0.5;

/// Number of missing cells an `rows x cols` grid should hold at fraction
/// `p`, rounding half up.
pub fn mcar_target(rows: usize, cols: usize, p: f64) -> usize {
    ((rows * cols) as f64 * p + 0.5).floor() as usize
}

/// Masks uniformly chosen observed cells of a row-major presence grid
/// until it holds [`mcar_target`] missing cells (pre-existing missing
/// cells count toward the target).
///
/// Any row or column the injection leaves fully missing gets one injected
/// cell restored and a replacement cell masked elsewhere, so the total
/// stays exact. Lines that were already fully missing in the input are
/// left alone. If the swaps get stuck, which only happens close to the
/// feasibility limit, the cells to keep are fixed first as a random
/// minimum edge cover and the rest are masked uniformly.
pub fn inject_mcar_grid<R: Rng + ?Sized>(
    present: &[bool],
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Injection(format!("fraction must lie in [0, 1), got {p}")));
    }
    if present.len() != rows * cols {
        return Err(Error::shape("inject_mcar", format!("{} cells for {rows}x{cols}", present.len())));
    }
    let mut out = present.to_vec();
    let existing = present.iter().filter(|&&v| !v).count();
    let new = mcar_target(rows, cols, p).saturating_sub(existing);
    if new == 0 {
        return Ok(out);
    }
    let row_full0: Vec<bool> = (0..rows).map(|i| (0..cols).all(|j| !present[i * cols + j])).collect();
    let col_full0: Vec<bool> = (0..cols).map(|j| (0..rows).all(|i| !present[i * cols + j])).collect();
    let free_rows = row_full0.iter().filter(|&&f| !f).count();
    let free_cols = col_full0.iter().filter(|&&f| !f).count();
    let observed: Vec<usize> = (0..rows * cols).filter(|&c| present[c]).collect();
    if observed.len() - new < free_rows.max(free_cols) {
        return Err(Error::Injection(format!(
            "masking {new} of {} observed cells cannot leave every row and column observed",
            observed.len()
        )));
    }

    let mut out_greedy = out.clone();
    if greedy_repair(&mut out_greedy, &observed, new, rows, cols, &row_full0, &col_full0, rng) {
        return Ok(out_greedy);
    }
    let keep = random_edge_cover(&out, rows, cols, &row_full0, &col_full0, rng);
    let maskable: Vec<usize> = observed.iter().copied().filter(|c| !keep[*c]).collect();
    if maskable.len() < new {
        return Err(Error::Injection(format!(
            "masking {new} of {} observed cells cannot leave every row and column observed",
            observed.len()
        )));
    }
    for k in index::sample(rng, maskable.len(), new) {
        out[maskable[k]] = false;
    }
    Ok(out)
}

/// Uniform masking followed by swap repairs. Returns false when no swap can
/// fix a fully missing line, which happens near the feasibility limit.
#[allow(clippy::too_many_arguments)]
fn greedy_repair<R: Rng + ?Sized>(
    out: &mut [bool],
    observed: &[usize],
    new: usize,
    rows: usize,
    cols: usize,
    row_full0: &[bool],
    col_full0: &[bool],
    rng: &mut R,
) -> bool {
    let mut injected = vec![false; rows * cols];
    for k in index::sample(rng, observed.len(), new) {
        out[observed[k]] = false;
        injected[observed[k]] = true;
    }
    let mut row_obs: Vec<usize> = (0..rows).map(|i| (0..cols).filter(|&j| out[i * cols + j]).count()).collect();
    let mut col_obs: Vec<usize> = (0..cols).map(|j| (0..rows).filter(|&i| out[i * cols + j]).count()).collect();

    for _ in 0..rows * cols {
        let line: Vec<usize> = if let Some(i) = (0..rows).find(|&i| row_obs[i] == 0 && !row_full0[i]) {
            (0..cols).map(|j| i * cols + j).collect()
        } else if let Some(j) = (0..cols).find(|&j| col_obs[j] == 0 && !col_full0[j]) {
            (0..rows).map(|i| i * cols + j).collect()
        } else {
            return true;
        };
        let candidates: Vec<usize> = line.into_iter().filter(|&c| injected[c]).collect();
        let Some(&restore) = candidates.choose(rng) else { return false };
        out[restore] = true;
        injected[restore] = false;
        row_obs[restore / cols] += 1;
        col_obs[restore % cols] += 1;

        let eligible: Vec<usize> = (0..rows * cols)
            .filter(|&c| out[c] && row_obs[c / cols] >= 2 && col_obs[c % cols] >= 2)
            .collect();
        let Some(&mask) = eligible.choose(rng) else { return false };
        out[mask] = false;
        injected[mask] = true;
        row_obs[mask / cols] -= 1;
        col_obs[mask % cols] -= 1;
    }
    false
}

/// A minimum set of observed cells touching every row and column that has
/// one, built from a maximum bipartite matching (Kuhn's algorithm over
/// shuffled adjacency) plus one random cell per unmatched line.
fn random_edge_cover<R: Rng + ?Sized>(
    present: &[bool],
    rows: usize,
    cols: usize,
    row_full: &[bool],
    col_full: &[bool],
    rng: &mut R,
) -> Vec<bool> {
    let mut adj: Vec<Vec<usize>> = (0..cols).map(|j| (0..rows).filter(|&i| present[i * cols + j]).collect()).collect();
    for a in &mut adj {
        a.shuffle(rng);
    }
    let mut row_match: Vec<Option<usize>> = vec![None; rows];
    fn augment(j: usize, adj: &[Vec<usize>], seen: &mut [bool], row_match: &mut [Option<usize>]) -> bool {
        for &i in &adj[j] {
            if !seen[i] {
                seen[i] = true;
                if row_match[i].is_none_or(|j2| augment(j2, adj, seen, row_match)) {
                    row_match[i] = Some(j);
                    return true;
                }
            }
        }
        false
    }
    let mut order: Vec<usize> = (0..cols).filter(|&j| !col_full[j]).collect();
    order.shuffle(rng);
    for &j in &order {
        augment(j, &adj, &mut vec![false; rows], &mut row_match);
    }
    let mut keep = vec![false; rows * cols];
    let mut col_covered = vec![false; cols];
    for (i, m) in row_match.iter().enumerate() {
        if let Some(j) = *m {
            keep[i * cols + j] = true;
            col_covered[j] = true;
        }
    }
    for i in (0..rows).filter(|&i| !row_full[i] && row_match[i].is_none()) {
        let choices: Vec<usize> = (0..cols).filter(|&j| present[i * cols + j]).collect();
        let &j = choices.choose(rng).expect("row has an observed cell");
        keep[i * cols + j] = true;
        col_covered[j] = true;
    }
    for j in (0..cols).filter(|&j| !col_full[j] && !col_covered[j]) {
        let &i = adj[j].choose(rng).expect("column has an observed cell");
        keep[i * cols + j] = true;
    }
    keep
}

/// [`inject_mcar_grid`] on a dataset's presence grid, seeded by `seed`.
/// Values and labels are untouched.
pub fn inject_mcar(data: &TabularDataset, p: f64, seed: u64) -> Result<TabularDataset> {
    let mut rng = rng_from(&[seed]);
    let present = inject_mcar_grid(data.present(), data.n_samples(), data.n_features(), p, &mut rng)?;
    data.with_present(present)
}

/// What [`augment_sample`] did to one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    /// The Bernoulli coin came up "mask".
    pub applied: bool,
    /// Number of present cells hidden.
    pub masked: usize,
}

/// The masking regularizer. With probability one half the presence vector
/// is returned unchanged; otherwise `c ~ U{1, .., v-1}` of the `v` present
/// cells are hidden, chosen uniformly. Samples with `v <= 1` are never
/// changed.
pub fn augment_sample<R: Rng + ?Sized>(present: &[bool], rng: &mut R) -> (Vec<bool>, Augmentation) {
    let mut out = present.to_vec();
    let applied = rng.random_bool(AUGMENT_PROBABILITY);
    let observed: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    if !applied || observed.len() <= 1 {
        return (out, Augmentation { applied, masked: 0 });
    }
    let c = rng.random_range(1..observed.len());
    for k in index::sample(rng, observed.len(), c) {
        out[observed[k]] = false;
    }
    (out, Augmentation { applied, masked: c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_lines(g: &[bool], rows: usize, cols: usize) -> bool {
        (0..rows).any(|i| (0..cols).all(|j| !g[i * cols + j]))
            || (0..cols).any(|j| (0..rows).all(|i| !g[i * cols + j]))
    }

    #[test]
    fn tight_grids_reach_the_feasibility_limit() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = inject_mcar_grid(&[true; 9], 3, 3, 0.66, &mut rng).unwrap();
            assert_eq!(g.iter().filter(|&&v| v).count(), 3);
            assert!(!full_lines(&g, 3, 3));
            let g = inject_mcar_grid(&[true; 12], 2, 6, 0.5, &mut rng).unwrap();
            assert_eq!(g.iter().filter(|&&v| v).count(), 6);
            assert!(!full_lines(&g, 2, 6));
        }
        assert!(inject_mcar_grid(&[true; 9], 3, 3, 0.75, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn count_identity_small_grid() {
        let mut present = vec![true; 20];
        present[7] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = inject_mcar_grid(&present, 4, 5, 0.25, &mut rng).unwrap();
        assert_eq!(out.iter().filter(|&&v| !v).count(), 5);
        assert!(!out[7]);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let present = vec![true, false, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_mcar_grid(&present, 2, 2, 0.0, &mut rng).unwrap(), present);
    }

    #[test]
    fn infeasible_fraction_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 2x2 at 0.75 leaves one observed cell for two rows.
        assert!(matches!(
            inject_mcar_grid(&[true; 4], 2, 2, 0.75, &mut rng),
            Err(Error::Injection(_))
        ));
        assert!(inject_mcar_grid(&[true; 4], 2, 2, 1.0, &mut rng).is_err());
    }

    #[test]
    fn augment_single_present_never_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (out, a) = augment_sample(&[false, true, false], &mut rng);
            assert_eq!(out, [false, true, false]);
            assert_eq!(a.masked, 0);
        }
    }

    proptest! {
        #[test]
        fn injection_invariants(rows in 2usize..12, cols in 2usize..12, p in 0.0f64..0.6, seed in any::<u64>()) {
            let present = vec![true; rows * cols];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(out) = inject_mcar_grid(&present, rows, cols, p, &mut rng) {
                prop_assert_eq!(out.iter().filter(|&&v| !v).count(), mcar_target(rows, cols, p));
                prop_assert!(!full_lines(&out, rows, cols));
            } else {
                prop_assert!(rows * cols - mcar_target(rows, cols, p) < rows.max(cols) || p > 0.4);
            }
        }

        #[test]
        fn augment_keeps_one_and_never_unmasks(mask in proptest::collection::vec(any::<bool>(), 1..20), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, a) = augment_sample(&mask, &mut rng);
            let v = mask.iter().filter(|&&p| p).count();
            for (o, m) in out.iter().zip(&mask) {
                prop_assert!(!*o || *m);
            }
            if v >= 1 {
                prop_assert!(out.iter().any(|&p| p));
            }
            prop_assert_eq!(v - out.iter().filter(|&&p| p).count(), a.masked);
        }
    }
}
