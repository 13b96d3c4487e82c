//! Decay rates from the reference configuration, then a sweep over sigma on a
//! synthetic model showing how much attention the newest token keeps on the
//! vision prefix.
//!
//! ```text
//! cargo run --release --example decay_rate_sweep
//! ```

use farsight::decoder::{generate_synthetic_model, ModelConfig, TokenSequence};
use farsight::diagnostics::decay_rate_sweep;
use farsight::masks::decay_rate;

fn main() -> farsight::Result<()> {
    for (seq, alpha) in [(256, 1024.0), (512, 1024.0), (1024, 1024.0), (256, 4096.0)] {
        println!("decay_rate({seq}, {alpha}) = {}", decay_rate(seq, alpha)?);
    }

    let model = generate_synthetic_model(ModelConfig {
        vocab_size: 64,
        d_model: 32,
        head_count: 4,
        layer_count: 2,
        seed: Some(7),
    })?;
    let prompt = TokenSequence::new((0..12).map(|i| (i * 5) % 64).collect(), 8)?;
    let sigmas = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 50.0];
    println!("\n{:>8} {:>12} {:>12}", "sigma", "visual mass", "entropy");
    for row in decay_rate_sweep(&model, &prompt, &sigmas, 8)? {
        println!("{:>8} {:>12.6} {:>12.6}", row.sigma, row.mean_visual_mass, row.visual_entropy);
    }
    Ok(())
}
