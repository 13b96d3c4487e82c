//! Rotary embeddings: score shift invariance, norm preservation and the
//! relative upper bound on score magnitude as distance grows.
//!
//! ```text
//! cargo run --example rope_long_term_decay
//! ```

use farsight::attention::{rope_rotate, rope_score, RopeParams};
use farsight::diagnostics::rope_decay_profile;
use farsight::numerics::{dot, SeededRng};

fn main() -> farsight::Result<()> {
    let params = RopeParams::new(64)?;
    let mut rng = SeededRng::new(11);
    let q: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
    let k: Vec<f64> = (0..64).map(|_| rng.normal()).collect();

    let base = rope_score(&q, 10, &k, 4, &params)?;
    for shift in [0, 1, 7, 32, 1000] {
        let s = rope_score(&q, 10 + shift, &k, 4 + shift, &params)?;
        println!("shift {shift:>4}: score {s:.12} (diff {:.1e})", (s - base).abs());
    }

    let r = rope_rotate(&q, 123, &params)?;
    println!("norm before {:.12}, after {:.12}", dot(&q, &q).sqrt(), dot(&r, &r).sqrt());

    let profile = rope_decay_profile(64, 10_000.0, 256)?;
    for d in [0, 1, 2, 4, 8, 16, 32, 64, 128, 256] {
        println!("distance {d:>3}: relative bound {:.4}", profile[d]);
    }
    Ok(())
}
