use crate::error::{dim, Result};
use crate::masks::RegisterSchedule;
use crate::numerics::{dot, softmax_row, Matrix};

use super::AttentionInputs;

/// Gradients of `sum(upstream * output)` with respect to Q, K and V.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Analytic backward pass of register attention.
///
/// Register columns sit in every softmax denominator but carry no value rows,
/// so their upstream signal is zero; they still shape the Jacobian through
/// the shared normalizer.
pub fn farsight_attention_grad(
    inputs: &AttentionInputs,
    schedule: &RegisterSchedule,
    upstream: &Matrix,
) -> Result<AttentionGrads> {
    inputs.validate()?;
    schedule.validate()?;
    let (n, d) = inputs.q.shape();
    if upstream.shape() != inputs.v.shape() {
        return Err(dim(format!(
            "upstream {:?} does not match output {:?}",
            upstream.shape(),
            inputs.v.shape()
        )));
    }
    let slope = schedule.slope_for_head(0)?;
    let gain = if schedule.pseudocode_scaling { slope } else { 1.0 };

    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, inputs.v.cols());
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| if j <= i { inputs.score(i, j) * gain } else { -((j - i) as f64) * slope })
            .collect();
        let p = softmax_row(&logits)?;
        let g = upstream.row(i);

        // dL/dp_j for surviving columns; zero for registers.
        let dp: Vec<f64> = (0..=i).map(|j| dot(g, inputs.v.row(j))).collect();
        let weighted: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();

        for j in 0..=i {
            for (o, &gv) in dv.row_mut(j).iter_mut().zip(g) {
                *o += p[j] * gv;
            }
            // Softmax Jacobian restricted to surviving columns, chained through
            // the score scale.
            let ds = p[j] * (dp[j] - weighted) * gain * inputs.scale;
            for c in 0..d {
                dq[(i, c)] += ds * inputs.k[(j, c)];
                dk[(j, c)] += ds * inputs.q[(i, c)];
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::farsight_attention;
    use crate::numerics::{finite_difference_grad, SeededRng};

    fn loss(inputs: &AttentionInputs, s: &RegisterSchedule, up: &Matrix) -> f64 {
        let out = farsight_attention(inputs, s).unwrap().output;
        out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = dot(a, a).sqrt().max(dot(b, b).sqrt()).max(1e-8);
        diff / scale
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = SeededRng::new(1);
        let inputs = AttentionInputs::new(
            Matrix::random_normal(4, 3, 1.0, &mut rng),
            Matrix::random_normal(4, 3, 1.0, &mut rng),
            Matrix::random_normal(4, 3, 1.0, &mut rng),
        )
        .unwrap();
        let g =
            farsight_attention_grad(&inputs, &RegisterSchedule::default(), &Matrix::zeros(4, 3))
                .unwrap();
        assert!(g.dq.data().iter().chain(g.dk.data()).chain(g.dv.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_constant_attention() {
        let inputs = AttentionInputs::new(
            Matrix::from_rows(&[[0.5, -1.0]]).unwrap(),
            Matrix::from_rows(&[[2.0, 0.1]]).unwrap(),
            Matrix::from_rows(&[[1.0, 3.0]]).unwrap(),
        )
        .unwrap();
        let up = Matrix::from_rows(&[[0.7, -0.2]]).unwrap();
        let g = farsight_attention_grad(&inputs, &RegisterSchedule::default(), &up).unwrap();
        assert_eq!(g.dq, Matrix::zeros(1, 2));
        assert_eq!(g.dk, Matrix::zeros(1, 2));
        assert_eq!(g.dv, up);
    }

    #[test]
    fn matches_central_differences() {
        let mut rng = SeededRng::new(77);
        for scaling in [false, true] {
            let s = RegisterSchedule::default().with_pseudocode_scaling(scaling);
            let (n, d) = (6, 4);
            let inputs = AttentionInputs::new(
                Matrix::random_normal(n, d, 1.0, &mut rng),
                Matrix::random_normal(n, d, 1.0, &mut rng),
                Matrix::random_normal(n, d, 1.0, &mut rng),
            )
            .unwrap();
            let up = Matrix::random_normal(n, d, 1.0, &mut rng);
            let g = farsight_attention_grad(&inputs, &s, &up).unwrap();

            let fd_q = finite_difference_grad(
                |x| {
                    let mut i2 = inputs.clone();
                    i2.q = Matrix::from_vec(n, d, x.to_vec()).unwrap();
                    loss(&i2, &s, &up)
                },
                inputs.q.data(),
                1e-6,
            )
            .unwrap();
            let fd_k = finite_difference_grad(
                |x| {
                    let mut i2 = inputs.clone();
                    i2.k = Matrix::from_vec(n, d, x.to_vec()).unwrap();
                    loss(&i2, &s, &up)
                },
                inputs.k.data(),
                1e-6,
            )
            .unwrap();
            let fd_v = finite_difference_grad(
                |x| {
                    let mut i2 = inputs.clone();
                    i2.v = Matrix::from_vec(n, d, x.to_vec()).unwrap();
                    loss(&i2, &s, &up)
                },
                inputs.v.data(),
                1e-6,
            )
            .unwrap();
            assert!(rel_err(g.dq.data(), &fd_q) < 1e-5);
            assert!(rel_err(g.dk.data(), &fd_k) < 1e-5);
            assert!(rel_err(g.dv.data(), &fd_v) < 1e-5);
        }
    }
}
