//! Central finite-difference checks of every differentiable operation,
//! including the full model and total loss.
//!
//! cargo run --release --example gradient_check -- [TRIALS]

use nrsfm::diffcore::gradcheck::op_suite;

fn main() -> nrsfm::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let start = std::time::Instant::now();
    let checks = op_suite(None, trials, 7)?;
    for c in &checks {
        println!(
            "{:<14} {:>4}  max rel err {:.2e}  tol {:.0e}",
            c.name,
            if c.passed { "ok" } else { "FAIL" },
            c.max_rel_error,
            c.tolerance
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} ops, {failed} failed, {:.1}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
