//! MCAR injection on a presence grid: the missing count is exact and no
//! row or column ends up fully missing.

use naim::missingness::{inject_mcar_grid, mcar_target};
use naim::seed::rng_from;

fn main() -> naim::Result<()> {
    let (rows, cols) = (8, 6);
    let mut present = vec![true; rows * cols];
    present[3] = false;
    present[20] = false;
    for p in [0.1, 0.25, 0.5, 0.75] {
        let g = inject_mcar_grid(&present, rows, cols, p, &mut rng_from(&[5]))?;
        let missing = g.iter().filter(|&&v| !v).count();
        println!("p = {p:.2}: target {:>2}, missing {missing:>2}", mcar_target(rows, cols, p));
        for r in 0..rows {
            let line: String = (0..cols).map(|c| if g[r * cols + c] { '#' } else { '.' }).collect();
            println!("  {line}");
        }
    }
    Ok(())
}
