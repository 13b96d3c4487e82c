//! Register attention on a tiny input: the joint softmax over valid scores and
//! decaying registers, the surviving mass per row, and the split into the
//! part that survives and the part the registers absorb.
//!
//! ```text
//! cargo run --example register_attention
//! ```

use farsight::attention::{causal_attention, farsight_attention, farsight_row_decomposition, AttentionInputs};
use farsight::masks::{register_matrix, RegisterSchedule};
use farsight::numerics::{Matrix, SeededRng};

fn print_matrix(label: &str, m: &Matrix) {
    println!("{label}:");
    for i in 0..m.rows() {
        let cells: Vec<String> = m.row(i).iter().map(|x| format!("{x:>8.4}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> farsight::Result<()> {
    let n = 5;
    let schedule = RegisterSchedule::default();
    println!("decay rate sigma = {}", schedule.sigma);
    print_matrix("register scores", &register_matrix(n, schedule.sigma)?);

    let mut rng = SeededRng::new(3);
    let inputs = AttentionInputs::new(
        Matrix::random_normal(n, 4, 1.0, &mut rng),
        Matrix::random_normal(n, 4, 1.0, &mut rng),
        Matrix::random_normal(n, 4, 1.0, &mut rng),
    )?;

    let causal = causal_attention(&inputs)?;
    let far = farsight_attention(&inputs, &schedule)?;
    print_matrix("causal probabilities", &causal.probs);
    print_matrix("register-attention probabilities", &far.probs);

    println!("surviving mass per row:");
    for (i, b) in far.beta.iter().enumerate() {
        println!("  row {i}: {b:.6}");
    }

    // Each surviving row is the causal row scaled by its surviving mass.
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..=i {
            worst = worst.max((far.probs[(i, j)] - far.beta[i] * causal.probs[(i, j)]).abs());
        }
    }
    println!("max |p - beta * causal| = {worst:.3e}");

    let (alpha, gamma) = farsight_row_decomposition(&inputs, &schedule, 1)?;
    println!("row 1 surviving part {alpha:.4?}, register part {gamma:.4?}");
    Ok(())
}
