//! The per-sample masking regularizer: half the time nothing changes,
//! otherwise between 1 and v-1 of the v present cells are hidden.

use naim::missingness::augment_sample;
use naim::seed::rng_from;

fn main() {
    let present = [true, true, false, true, true, false];
    let mut rng = rng_from(&[9]);
    let mut counts = [0usize; 5];
    for i in 0..20_000 {
        let (out, a) = augment_sample(&present, &mut rng);
        counts[a.masked] += 1;
        if i < 6 {
            let s: String = out.iter().map(|&p| if p { '#' } else { '.' }).collect();
            println!("{s}  applied={} masked={}", a.applied, a.masked);
        }
    }
    println!("masked-count histogram over 20000 draws: {counts:?}");
}
