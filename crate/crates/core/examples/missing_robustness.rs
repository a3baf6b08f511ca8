//! Train once on complete data, then score the same test rows with more
//! and more cells removed. No imputation happens at any point.

use naim::experiment::{inject, load_experiment_data, train_one, ExperimentConfig, Method};

fn main() -> naim::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json"))?;
    let model = train_one(&cfg, Method::Naim, 0.0, 0, &mut |_| {})?;
    let (_, raw, plan) = load_experiment_data(&cfg)?;
    let test = raw.subset(&plan.folds[0].test);
    for rate in [0.0, 0.1, 0.25, 0.5, 0.75] {
        let scored = model.score(&inject(test.clone(), rate, 42)?)?;
        println!("test missing {:>3.0}%  AUC {:.4}  loss {:.4}", rate * 100.0, scored.auc, scored.loss);
    }
    Ok(())
}
