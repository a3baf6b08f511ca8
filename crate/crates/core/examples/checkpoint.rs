//! Save a trained model with its preprocessing, load it back, and check the
//! scores agree.

use naim::data::load_csv;
use naim::experiment::{train_one, ExperimentConfig, Method, TrainedModel};

fn main() -> naim::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json"))?;
    let model = train_one(&cfg, Method::NaimNoRegMean, 0.0, 1, &mut |_| {})?;
    let path = std::env::temp_dir().join("naim-toy.ckpt");
    model.save(&path)?;
    let loaded = TrainedModel::load(&path)?;

    let raw = load_csv(&cfg.dataset, &model.schema)?;
    let (a, b) = (model.score(&raw)?, loaded.score(&raw)?);
    println!("method {}, AUC on all rows {:.4} before and {:.4} after reload", loaded.method.id(), a.auc, b.auc);
    assert_eq!(a.probs, b.probs);
    Ok(())
}
