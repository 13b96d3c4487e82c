//! Cached decoding against full recompute. The causal and ALiBi kernels agree
//! exactly; register attention drifts because cached rows keep the registers
//! they had when first computed.
//!
//! ```text
//! cargo run --release --example kv_cache_divergence
//! ```

use farsight::attention::MaskMode;
use farsight::decoder::{generate_synthetic_model, ModelConfig, TokenSequence};
use farsight::diagnostics::cache_divergence;
use farsight::masks::RegisterSchedule;

fn main() -> farsight::Result<()> {
    let model = generate_synthetic_model(ModelConfig {
        vocab_size: 64,
        d_model: 32,
        head_count: 4,
        layer_count: 2,
        seed: Some(7),
    })?;
    let prompt = TokenSequence::new(vec![5, 9, 14, 2, 33, 40], 3)?;
    for sigma in [0.1, 0.8, 50.0] {
        let schedule = RegisterSchedule::with_sigma(sigma)?;
        for mode in MaskMode::ALL {
            let d = cache_divergence(&model, &prompt, mode, &schedule, 12)?;
            println!(
                "sigma {sigma:>4} {mode:>9}: first mismatch {:?}, max log-prob gap {:.3e}",
                d.first_mismatch, d.max_log_prob_gap
            );
        }
    }
    Ok(())
}
