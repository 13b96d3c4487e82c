//! Runs the seeded property suite, optionally with an injected defect.
//!
//! ```text
//! cargo run --release --example property_suite
//! cargo run --release --example property_suite -- missing-remask
//! ```

use farsight::verify::{run_property_suite, Mutation, SuiteConfig};

fn main() -> farsight::Result<()> {
    let mutation = std::env::args().nth(1).map(|s| s.parse::<Mutation>()).transpose()?;
    let config = SuiteConfig { sizes: vec![2, 3, 8, 32], mutation, ..SuiteConfig::default() };
    let reports = run_property_suite(&config)?;
    for r in &reports {
        println!(
            "{:<22} n={:<4} max_dev={:<12.3e} tol={:<8.0e} {}",
            r.property,
            r.size,
            r.max_dev,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{failed} of {} checks failed", reports.len());
    Ok(())
}
