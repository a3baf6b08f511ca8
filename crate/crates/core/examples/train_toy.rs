//! Train NAIM on the bundled toy table (mixed types, some cells missing)
//! and report test AUC.

use naim::data::{load_csv, stratified_kfold, Preprocessor, SchemaSpec};
use naim::metrics::auc;
use naim::model::{NaimConfig, NaimParameters, TokenKind};
use naim::seed::rng_from;
use naim::train::{positive_scores, score_dataset, train_with_observer, TrainConfig};

fn main() -> naim::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let spec = SchemaSpec::load(format!("{dir}/toy.schema.json"))?;
    let raw = load_csv(format!("{dir}/toy.csv"), &spec)?;
    let fold = &stratified_kfold(&raw.labels, 5, 3)?.folds[0];

    let pre = Preprocessor::fit(&raw.subset(&fold.train));
    let train = pre.apply(&raw.subset(&fold.train))?;
    let val = pre.apply(&raw.subset(&fold.validation))?;
    let test = pre.apply(&raw.subset(&fold.test))?;
    println!("train {} / val {} / test {} rows, {} missing training cells", train.n_samples(), val.n_samples(), test.n_samples(), train.missing_count());

    let cfg = NaimConfig { d_e: 6, layers: 2, heads: 3, ff_dim: 32, ..NaimConfig::default() };
    let params = NaimParameters::init(&cfg, &TokenKind::from_schema(train.schema()), &mut rng_from(&[3]))?;
    let tc = TrainConfig { max_epochs: 80, initial_lr: 5e-3, patience: 25, warmup_epochs: 10, plateau_window: 5, ..TrainConfig::default() };
    let out = train_with_observer(params, &train, &val, &tc, |r| {
        if r.epoch % 10 == 0 {
            println!("epoch {:>3}  train {:.4}  val {:.4}  lr {:e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
    })?;
    let (loss, probs) = score_dataset(&out.params, &test)?;
    println!("best epoch {}, test loss {loss:.4}, test AUC {:.4}", out.history.best_epoch, auc(&positive_scores(&probs), test.labels())?);
    Ok(())
}
