//! Token embeddings of one mixed-type sample. Missing cells take the
//! padding row and embed to zero whatever their raw value.

use naim::model::{embed_sample, NaimConfig, NaimParameters, TokenKind};
use naim::seed::rng_from;

fn main() -> naim::Result<()> {
    let cfg = NaimConfig { d_e: 4, layers: 1, heads: 2, ff_dim: 8, ..NaimConfig::default() };
    let tokens = [TokenKind::Numerical, TokenKind::Categorical(3), TokenKind::Numerical, TokenKind::Categorical(2)];
    let params = NaimParameters::init(&cfg, &tokens, &mut rng_from(&[1]))?;

    let values = [0.25, 2.0, 0.9, 1.0];
    let present = [true, true, false, false];
    let e = embed_sample(&params, &values, &present)?;
    for (i, kind) in tokens.iter().enumerate() {
        let row: Vec<String> = e.row(i).iter().map(|v| format!("{v:>8.4}")).collect();
        println!("{kind:?} present={} -> {}", present[i], row.join(" "));
    }
    Ok(())
}
