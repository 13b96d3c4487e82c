//! Writes a synthetic model to disk, reads it back and checks that the bytes
//! and digest are stable.
//!
//! ```text
//! cargo run --example model_file
//! ```

use farsight::decoder::{generate_synthetic_model, load_model, model_digest, save_model, write_model, ModelConfig};

fn main() -> farsight::Result<()> {
    let config = ModelConfig { vocab_size: 64, d_model: 32, head_count: 4, layer_count: 2, seed: Some(7) };
    let model = generate_synthetic_model(config)?;
    let path = std::env::temp_dir().join("farsight-example.fsm");
    save_model(&model, &path)?;
    let back = load_model(&path)?;

    println!("wrote {} ({} bytes)", path.display(), write_model(&model)?.len());
    println!("digest   {}", model_digest(&model)?);
    println!("reloaded {}", model_digest(&back)?);
    println!("identical: {}", back == model);
    std::fs::remove_file(&path)?;
    Ok(())
}
