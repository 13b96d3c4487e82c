//! Greedy, seeded sampling and beam search on a synthetic model, under each
//! mask mode.
//!
//! ```text
//! cargo run --release --example decoding_strategies
//! ```

use farsight::attention::MaskMode;
use farsight::decoder::{decode, generate_synthetic_model, DecodeOptions, ModelConfig, Strategy, TokenSequence};
use farsight::masks::RegisterSchedule;

fn main() -> farsight::Result<()> {
    let model = generate_synthetic_model(ModelConfig {
        vocab_size: 64,
        d_model: 32,
        head_count: 4,
        layer_count: 2,
        seed: Some(7),
    })?;
    let prompt = TokenSequence::new(vec![1, 2, 3, 4], 2)?;
    let strategies = [
        Strategy::Greedy,
        Strategy::Sample { temperature: 1.0, seed: 9 },
        Strategy::Sample { temperature: 0.3, seed: 9 },
        Strategy::Beam { width: 1 },
        Strategy::Beam { width: 4 },
    ];
    for mode in MaskMode::ALL {
        println!("{mode}");
        for strategy in strategies {
            let opts = DecodeOptions::new(strategy, mode, RegisterSchedule::default(), 8);
            let r = decode(&model, &prompt, &opts)?;
            println!("  {:<40} {:?} log p = {:.4}", format!("{strategy:?}"), r.generated, r.cumulative_log_prob);
        }
    }
    Ok(())
}
