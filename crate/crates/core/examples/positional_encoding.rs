//! With every token identical the attention pattern carries no content, yet
//! the surviving mass still rises row by row: the registers leak position.
//!
//! ```text
//! cargo run --example positional_encoding -- 12 0.8
//! ```

use farsight::attention::{farsight_attention, AttentionInputs};
use farsight::masks::RegisterSchedule;
use farsight::numerics::Matrix;

fn main() -> farsight::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(12);
    let sigma: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.8);

    let inputs = AttentionInputs::new(Matrix::zeros(n, 4), Matrix::filled(n, 4, 1.0), Matrix::filled(n, 4, 1.0))?;
    let r = farsight_attention(&inputs, &RegisterSchedule::with_sigma(sigma)?)?;
    println!("n = {n}, sigma = {sigma}");
    for (i, b) in r.beta.iter().enumerate() {
        let bar = "#".repeat((b * 50.0).round() as usize);
        println!("{:>4} {b:.6} {bar}", i + 1);
    }
    Ok(())
}
