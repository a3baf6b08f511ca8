//! ROC-AUC, the Wilcoxon signed-rank test, and grid aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which [`wilcoxon_signed_rank`] uses the exact
/// null distribution.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

/// Significance level for win/loss counting.
pub const SIGNIFICANCE: f64 = 0.05;

/// 1-based ranks of `values` with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Area under the ROC curve of positive-class `scores` against binary
/// `labels` (1 = positive): the probability that a random positive outranks
/// a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not binary")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Paired two-sided signed-rank test of `a - b`. Zero differences are
/// dropped and tied magnitudes share midranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Metric("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Metric("all paired differences are zero".into()));
    }
    let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let statistic: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    if n <= EXACT_WILCOXON_MAX_N {
        Ok(WilcoxonResult { statistic, p_value: exact_p_value(&ranks, statistic), n, exact: true })
    } else {
        Ok(WilcoxonResult { statistic, p_value: normal_p_value(&ranks, statistic), n, exact: false })
    }
}

/// Exact two-sided p-value of the positive-rank sum `w` under the null in
/// which every sign is an independent fair coin. Midranks are doubled to
/// integers so the distribution is a subset-sum count.
fn exact_p_value(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let target = (2.0 * w).round() as usize;
    let all: f64 = counts.iter().sum();
    let lower: f64 = counts[..=target].iter().sum::<f64>() / all;
    let upper: f64 = counts[target..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p_value(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
}

/// AUC of one fold of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub train_pct: u32,
    pub test_pct: u32,
    pub method: String,
    pub fold: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train_pct: u32,
    pub test_pct: u32,
    pub method: String,
    pub mean_auc: f64,
    /// Sample standard deviation over folds divided by sqrt(folds).
    pub std_error: f64,
    pub folds: usize,
}

/// Mean and standard error per (method, train %, test %), in method then
/// percentage order. Every cell needs at least two folds.
pub fn aggregate_grid(scores: &[FoldScore]) -> Result<Vec<GridCell>> {
    let mut cells: BTreeMap<(String, u32, u32), Vec<f64>> = BTreeMap::new();
    for s in scores {
        cells.entry((s.method.clone(), s.train_pct, s.test_pct)).or_default().push(s.auc);
    }
    cells
        .into_iter()
        .map(|((method, train_pct, test_pct), aucs)| {
            let k = aucs.len();
            if k < 2 {
                return Err(Error::Metric(format!(
                    "cell {method} {train_pct}/{test_pct} has {k} fold; standard error needs at least 2"
                )));
            }
            let mean = aucs.iter().sum::<f64>() / k as f64;
            // Shifted by the first fold so identical AUCs give exactly zero.
            let shifted: Vec<f64> = aucs.iter().map(|a| a - aucs[0]).collect();
            let shift_mean = shifted.iter().sum::<f64>() / k as f64;
            let var = shifted.iter().map(|d| (d - shift_mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            Ok(GridCell { train_pct, test_pct, method, mean_auc: mean, std_error: var.sqrt() / (k as f64).sqrt(), folds: k })
        })
        .collect()
}

/// Plain-text table: one row per method, one column per (train %, test %)
/// pair, entries `AUC (stderr)` in percent.
pub fn format_grid(cells: &[GridCell]) -> String {
    let mut columns: Vec<(u32, u32)> = cells.iter().map(|c| (c.train_pct, c.test_pct)).collect();
    columns.sort_unstable();
    columns.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    let entry = |m: &str, col: (u32, u32)| {
        cells
            .iter()
            .find(|c| c.method == m && (c.train_pct, c.test_pct) == col)
            .map(|c| format!("{:.2} ({:.2})", 100.0 * c.mean_auc, 100.0 * c.std_error))
            .unwrap_or_else(|| "-".into())
    };
    let name_width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max("train/test".len());
    let headers: Vec<String> = columns.iter().map(|(tr, te)| format!("{tr}/{te}")).collect();
    let widths: Vec<usize> = columns
        .iter()
        .zip(&headers)
        .map(|(&col, h)| methods.iter().map(|m| entry(m, col).len()).max().unwrap_or(0).max(h.len()))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "train/test");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "{m:<name_width$}");
        for (&col, w) in columns.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", entry(m, col));
        }
        out.push('\n');
    }
    out
}

/// Outcome of one paired comparison of the reference method against a
/// competitor in one grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

/// Significant win when `p < 0.05` and the positive differences dominate,
/// significant loss when `p < 0.05` and the negative ones do.
pub fn compare(reference: &[f64], competitor: &[f64]) -> Result<Outcome> {
    let r = match wilcoxon_signed_rank(reference, competitor) {
        Ok(r) => r,
        Err(Error::Metric(_)) if reference == competitor => return Ok(Outcome::Tie),
        Err(e) => return Err(e),
    };
    let center = r.n as f64 * (r.n as f64 + 1.0) / 4.0;
    Ok(if r.p_value >= SIGNIFICANCE {
        Outcome::Tie
    } else if r.statistic > center {
        Outcome::Win
    } else {
        Outcome::Loss
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinLoss {
    pub competitor: String,
    pub dataset: String,
    pub wins: usize,
    pub losses: usize,
    pub cells: usize,
}

impl WinLoss {
    pub fn win_pct(&self) -> f64 {
        100.0 * self.wins as f64 / self.cells.max(1) as f64
    }

    pub fn loss_pct(&self) -> f64 {
        100.0 * self.losses as f64 / self.cells.max(1) as f64
    }
}

/// Win/loss percentages table: rows competitors, a `% Win  % Loss` column
/// pair per dataset, and a trailing mean pair.
pub fn format_win_loss(rows: &[WinLoss]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut competitors: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !competitors.contains(&r.competitor.as_str()) {
            competitors.push(&r.competitor);
        }
    }
    let width = competitors.iter().map(|c| c.len()).max().unwrap_or(0).max("Model".len());
    let col = datasets.iter().map(|d| d.len()).max().unwrap_or(0).max("% Win % Loss".len()).max("Mean".len());
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "");
    for d in datasets.iter().chain(std::iter::once(&"Mean")) {
        let _ = write!(out, " | {d:^col$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "Model");
    for _ in 0..=datasets.len() {
        let _ = write!(out, " | {:^col$}", "% Win % Loss");
    }
    out.push('\n');
    let pair = |w: f64, l: f64| format!("{w:>5.1} {l:>6.1}");
    let mut column_sums = vec![(0.0, 0.0, 0usize); datasets.len()];
    for c in &competitors {
        let _ = write!(out, "{c:<width$}");
        let (mut sw, mut sl, mut k) = (0.0, 0.0, 0);
        for (di, d) in datasets.iter().enumerate() {
            match rows.iter().find(|r| r.competitor == *c && r.dataset == *d) {
                Some(r) => {
                    let _ = write!(out, " | {:^col$}", pair(r.win_pct(), r.loss_pct()));
                    sw += r.win_pct();
                    sl += r.loss_pct();
                    k += 1;
                    let s = &mut column_sums[di];
                    *s = (s.0 + r.win_pct(), s.1 + r.loss_pct(), s.2 + 1);
                }
                None => {
                    let _ = write!(out, " | {:^col$}", "-");
                }
            }
        }
        let _ = write!(out, " | {:^col$}", pair(sw / k.max(1) as f64, sl / k.max(1) as f64));
        out.push('\n');
    }
    let _ = write!(out, "{:<width$}", "Mean");
    let (mut tw, mut tl) = (0.0, 0.0);
    for &(w, l, k) in &column_sums {
        let (w, l) = (w / k.max(1) as f64, l / k.max(1) as f64);
        tw += w;
        tl += l;
        let _ = write!(out, " | {:^col$}", pair(w, l));
    }
    let nd = datasets.len().max(1) as f64;
    let _ = write!(out, " | {:^col$}", pair(tw / nd, tl / nd));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&s, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.2], &[1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(auc(&s, &[1, 1, 1, 1]), Err(Error::Metric(_))));
        assert!(auc(&[0.1, f64::NAN], &[0, 1]).is_err());
    }

    #[test]
    fn midrank_examples() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_value - 0.0625).abs() < 1e-15);
        assert!(r.exact);
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        let sym = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0], &[0.0; 4]).unwrap();
        assert_eq!(sym.p_value, 1.0);
    }

    #[test]
    fn normal_approximation_for_large_n() {
        let a: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&a, &vec![0.0; 40]).unwrap();
        assert!(!r.exact);
        assert_eq!(r.statistic, 820.0);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn aggregate_examples() {
        let fs = |auc: f64, fold| FoldScore { train_pct: 0, test_pct: 25, method: "naim".into(), fold, auc };
        let cells = aggregate_grid(&[fs(0.8, 0), fs(0.9, 1)]).unwrap();
        assert!((cells[0].mean_auc - 0.85).abs() < 1e-15);
        assert!((cells[0].std_error - 0.05).abs() < 1e-15);
        let cells = aggregate_grid(&[fs(0.7, 0), fs(0.7, 1), fs(0.7, 2)]).unwrap();
        assert_eq!(cells[0].std_error, 0.0);
        assert!(aggregate_grid(&[fs(0.7, 0)]).is_err());
    }

    #[test]
    fn compare_outcomes() {
        let a: Vec<f64> = (0..30).map(|i| 0.5 + i as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 0.1).collect();
        assert_eq!(compare(&a, &b).unwrap(), Outcome::Win);
        assert_eq!(compare(&b, &a).unwrap(), Outcome::Loss);
        assert_eq!(compare(&a, &a).unwrap(), Outcome::Tie);
    }

    #[test]
    fn tables_render() {
        let cells = vec![
            GridCell { train_pct: 0, test_pct: 0, method: "naim".into(), mean_auc: 0.985, std_error: 0.0015, folds: 5 },
            GridCell { train_pct: 0, test_pct: 25, method: "naim".into(), mean_auc: 0.9747, std_error: 0.002, folds: 5 },
        ];
        let t = format_grid(&cells);
        assert!(t.contains("0/25") && t.contains("98.50 (0.15)"));
        let wl = vec![WinLoss { competitor: "naim-no-reg".into(), dataset: "spambase".into(), wins: 1, losses: 0, cells: 4 }];
        let t = format_win_loss(&wl);
        assert!(t.contains("25.0") && t.contains("Mean"));
    }
}
