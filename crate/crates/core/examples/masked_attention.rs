//! Four tokens, the third one missing. Column-only masking still writes a
//! mix of present values into the missing token's output row; masking rows
//! and columns leaves it at zero.

use naim::model::{classic_masked_attention, double_masked_attention};
use naim::tensor::Tensor;

fn show(name: &str, t: &Tensor) {
    println!("{name}:");
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:>8.4}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> naim::Result<()> {
    let q = Tensor::matrix(&[vec![0.3, -0.2], vec![0.9, 0.4], vec![-0.5, 0.7], vec![0.1, 0.1]])?;
    let k = Tensor::matrix(&[vec![0.2, 0.8], vec![-0.6, 0.3], vec![0.4, -0.9], vec![0.5, 0.5]])?;
    let v = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]])?;
    let present = [true, true, false, true];

    let (out, weights) = classic_masked_attention(&q, &k, &v, &present)?;
    show("column-masked weights", &weights);
    show("column-masked output", &out);
    let (out, weights) = double_masked_attention(&q, &k, &v, &present)?;
    show("row-and-column masked weights", &weights);
    show("row-and-column masked output", &out);
    Ok(())
}
