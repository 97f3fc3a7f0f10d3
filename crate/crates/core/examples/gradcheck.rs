//! Finite-difference check of every differentiable op and of both model types.
//!
//! cargo run --release --example gradcheck

use xabr::gradcheck::{self, CheckSettings};

fn main() -> xabr::Result<()> {
    let reports = gradcheck::run(None, CheckSettings::default())?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(())
}
