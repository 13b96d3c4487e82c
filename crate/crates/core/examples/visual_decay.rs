//! Greedy decoding under each mask mode with a vision prefix, comparing how
//! fast attention to the prefix fades as text is generated.
//!
//! ```text
//! cargo run --release --example visual_decay
//! ```

use farsight::decoder::{generate_synthetic_model, ModelConfig, TokenSequence};
use farsight::diagnostics::compare_modes;
use farsight::masks::RegisterSchedule;

fn main() -> farsight::Result<()> {
    let model = generate_synthetic_model(ModelConfig {
        vocab_size: 64,
        d_model: 32,
        head_count: 4,
        layer_count: 2,
        seed: Some(7),
    })?;
    let prompt = TokenSequence::new(vec![3, 17, 42, 8, 21, 55, 9, 1, 30, 12], 6)?;
    let steps = 10;
    // The first prompt token is a typical attention sink.
    let report = compare_modes(&model, &prompt, &RegisterSchedule::default(), steps, &[0])?;

    print!("{:>5}", "step");
    for mode in report.modes.keys() {
        print!(" {:>10} {:>10}", format!("{mode}"), "sink");
    }
    println!();
    for t in 0..steps {
        print!("{:>5}", t + 1);
        for r in report.modes.values() {
            print!(" {:>10.5} {:>10.5}", r.decay_curve.values[t], r.collapse.per_step[t]);
        }
        println!();
    }
    for (mode, r) in &report.modes {
        println!("{mode:>9}: generated {:?}", r.generated);
    }
    Ok(())
}
