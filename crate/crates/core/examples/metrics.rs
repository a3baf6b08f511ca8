//! AUC with tied scores, the exact Wilcoxon signed-rank test, and the
//! fold aggregation used in result tables.

use naim::metrics::{aggregate_grid, auc, format_grid, wilcoxon_signed_rank, FoldScore};

fn main() -> naim::Result<()> {
    let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.8, 0.1];
    let labels = [1, 1, 0, 1, 0, 1, 0];
    println!("AUC = {:.4}", auc(&scores, &labels)?);

    let a = [0.91, 0.88, 0.95, 0.79, 0.85, 0.90, 0.87, 0.93];
    let b = [0.89, 0.86, 0.95, 0.70, 0.80, 0.91, 0.80, 0.88];
    let w = wilcoxon_signed_rank(&a, &b)?;
    println!("Wilcoxon W+ = {} over {} pairs, p = {:.4} ({})", w.statistic, w.n, w.p_value, if w.exact { "exact" } else { "normal" });

    let folds: Vec<FoldScore> = [0.97, 0.98, 0.985, 0.975, 0.99]
        .iter()
        .enumerate()
        .flat_map(|(f, &auc)| {
            [(0, auc), (25, auc - 0.01), (75, auc - 0.09)].map(|(te, a)| FoldScore { train_pct: 0, test_pct: te, method: "naim".into(), fold: f, auc: a })
        })
        .collect();
    print!("{}", format_grid(&aggregate_grid(&folds)?));
    Ok(())
}
