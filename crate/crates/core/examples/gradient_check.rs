//! Analytic backward pass of register attention against central finite
//! differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use farsight::attention::{farsight_attention, farsight_attention_grad, AttentionInputs};
use farsight::masks::RegisterSchedule;
use farsight::numerics::{dot, finite_difference_grad, Matrix, SeededRng};
use farsight::verify::relative_error;

fn main() -> farsight::Result<()> {
    let (n, d) = (6, 5);
    let mut rng = SeededRng::new(5);
    let inputs = AttentionInputs::new(
        Matrix::random_normal(n, d, 1.0, &mut rng),
        Matrix::random_normal(n, d, 1.0, &mut rng),
        Matrix::random_normal(n, d, 1.0, &mut rng),
    )?;
    let upstream = Matrix::random_normal(n, d, 1.0, &mut rng);
    let schedule = RegisterSchedule::default();
    let grads = farsight_attention_grad(&inputs, &schedule, &upstream)?;

    let loss = |inp: &AttentionInputs| {
        farsight_attention(inp, &schedule).map(|r| dot(r.output.data(), upstream.data())).unwrap_or(f64::NAN)
    };

    let fd_q = finite_difference_grad(
        |x| {
            let mut p = inputs.clone();
            p.q.data_mut().copy_from_slice(x);
            loss(&p)
        },
        inputs.q.data(),
        1e-6,
    )?;
    let fd_k = finite_difference_grad(
        |x| {
            let mut p = inputs.clone();
            p.k.data_mut().copy_from_slice(x);
            loss(&p)
        },
        inputs.k.data(),
        1e-6,
    )?;
    let fd_v = finite_difference_grad(
        |x| {
            let mut p = inputs.clone();
            p.v.data_mut().copy_from_slice(x);
            loss(&p)
        },
        inputs.v.data(),
        1e-6,
    )?;
    println!("relative error dQ {:.2e}", relative_error(grads.dq.data(), &fd_q));
    println!("relative error dK {:.2e}", relative_error(grads.dk.data(), &fd_k));
    println!("relative error dV {:.2e}", relative_error(grads.dv.data(), &fd_v));
    Ok(())
}
