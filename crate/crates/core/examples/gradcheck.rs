//! Analytic gradients of every tape operation and of the full model loss
//! against central finite differences.

fn main() -> naim::Result<()> {
    for r in naim::gradcheck::run_suite()? {
        println!("{:<44} {:.2e}", r.name, r.max_relative_error);
    }
    Ok(())
}
