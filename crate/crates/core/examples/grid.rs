//! A complete cross-validated grid on the toy table: four methods, two
//! training and two test missing rates, three folds. Writes the report
//! files to a temporary directory and prints the tables.

use naim::experiment::{run_grid, ExperimentConfig, GridOptions};

fn main() -> naim::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json"))?;
    let out = std::env::temp_dir().join("naim-toy-grid");
    let report = run_grid(&cfg, &GridOptions { jobs: 2, out: Some(out.clone()), verbose: false })?;
    print!("{}", report.grid_text()?);
    println!("{} cells in {:.1}s, files in {}", report.cells.len(), report.manifest.total_seconds, out.display());
    Ok(())
}
