//! Mean/mode and KNN imputation of the toy table after removing a quarter
//! of its cells.

use naim::data::{load_csv, Preprocessor, SchemaSpec};
use naim::experiment::inject;
use naim::impute::{apply_knn, apply_mean, fit_knn, fit_mean};

fn main() -> naim::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let spec = SchemaSpec::load(format!("{dir}/toy.schema.json"))?;
    let full = load_csv(format!("{dir}/toy.csv"), &spec)?;
    let pre = Preprocessor::fit(&full);
    let truth = pre.apply(&full)?;
    let holed = pre.apply(&inject(full, 0.25, 1)?)?;

    let mean = apply_mean(&fit_mean(&holed), &holed)?;
    let knn = apply_knn(&fit_knn(&holed, 5)?, &holed)?;
    for (name, filled) in [("mean/mode", &mean), ("knn k=5", &knn)] {
        let (mut err, mut n) = (0.0, 0);
        for (idx, (&was, &now)) in truth.present().iter().zip(holed.present()).enumerate() {
            let numerical = idx % truth.n_features() < 3;
            if was && !now && numerical {
                err += (filled.values()[idx] - truth.values()[idx]).abs();
                n += 1;
            }
        }
        println!("{name:<9} mean absolute error on {n} removed numerical cells: {:.4}", err / n as f64);
    }
    Ok(())
}
