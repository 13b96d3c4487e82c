//! Brute-force references built from the definitions alone. Only numerics
//! primitives are shared with the rest of the crate.

use crate::attention::AttentionResult;
use crate::decoder::ModelWeights;
use crate::error::{dim, Result};
use crate::numerics::{matmul, softmax_row, Matrix};

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.rows() == 0 || q.cols() == 0 || k.shape() != q.shape() || v.rows() != q.rows() {
        return Err(dim(format!("oracle shapes Q {:?} K {:?} V {:?}", q.shape(), k.shape(), v.shape())));
    }
    Ok(())
}

fn scaled_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    Ok(matmul(q, &k.transpose())?.scale(1.0 / (q.cols() as f64).sqrt()))
}

/// Softmax that treats `-inf` entries as zero-probability.
fn masked_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 }).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn finish(probs: Matrix, v: &Matrix) -> Result<AttentionResult> {
    let beta = (0..probs.rows()).map(|i| probs.row(i).iter().sum()).collect();
    Ok(AttentionResult { output: matmul(&probs, v)?, probs, beta })
}

/// Dense `-inf` mask above the diagonal, then row softmax.
pub fn naive_causal(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<AttentionResult> {
    naive_biased_causal(q, k, v, 0.0)
}

/// Causal attention with a linear distance penalty `-slope * (i - j)`.
pub fn naive_biased_causal(q: &Matrix, k: &Matrix, v: &Matrix, slope: f64) -> Result<AttentionResult> {
    check_shapes(q, k, v)?;
    let n = q.rows();
    let scores = scaled_scores(q, k)?;
    let mask = Matrix::from_fn(n, n, |i, j| if j <= i { -slope * (i - j) as f64 } else { f64::NEG_INFINITY });
    let masked = scores.add(&mask)?;
    let mut probs = Matrix::zeros(n, n);
    for i in 0..n {
        probs.row_mut(i).copy_from_slice(&masked_softmax(masked.row(i)));
    }
    finish(probs, v)
}

/// Literal dense construction: `softmax(omega . C + P) . C`, then `. V`.
pub fn naive_farsight(q: &Matrix, k: &Matrix, v: &Matrix, sigma: f64) -> Result<AttentionResult> {
    check_shapes(q, k, v)?;
    let n = q.rows();
    let omega = scaled_scores(q, k)?;
    let ones_lower = Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 });
    let registers = Matrix::from_fn(n, n, |i, j| if j > i { -((j - i) as f64) * sigma } else { 0.0 });
    let w = omega.hadamard(&ones_lower)?.add(&registers)?;
    let mut soft = Matrix::zeros(n, n);
    for i in 0..n {
        soft.row_mut(i).copy_from_slice(&softmax_row(w.row(i))?);
    }
    finish(soft.hadamard(&ones_lower)?, v)
}

/// Kernel choice for the reference forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKernel {
    Causal,
    Registers { sigma: f64 },
    Alibi,
}

fn norm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let row = x.row(i);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (row[j] - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j]
    })
}

/// Rotation of each row by a block-diagonal matrix built explicitly.
fn rotate_rows(x: &Matrix, base: f64) -> Result<Matrix> {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for pos in 0..x.rows() {
        let mut r = Matrix::zeros(d, d);
        for m in 0..d / 2 {
            let theta = pos as f64 * base.powf(-2.0 * m as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            // row-vector convention: y = x R
            r[(2 * m, 2 * m)] = c;
            r[(2 * m, 2 * m + 1)] = s;
            r[(2 * m + 1, 2 * m)] = -s;
            r[(2 * m + 1, 2 * m + 1)] = c;
        }
        let rotated = matmul(&x.row_block(pos, 1), &r)?;
        out.row_mut(pos).copy_from_slice(rotated.row(0));
    }
    Ok(out)
}

/// Reference logits for `ids`.
pub fn oracle_forward(model: &ModelWeights, ids: &[usize], kernel: OracleKernel) -> Result<Matrix> {
    let c = &model.config;
    let n = ids.len();
    let dh = c.d_model / c.head_count;
    let mut x = Matrix::from_fn(n, c.d_model, |i, j| model.embedding[(ids[i], j)]);
    for layer in &model.layers {
        let h = norm_rows(&x, &layer.norm1_gain, &layer.norm1_bias);
        let q = matmul(&h, &layer.attn.wq)?;
        let k = matmul(&h, &layer.attn.wk)?;
        let v = matmul(&h, &layer.attn.wv)?;
        let mut concat = Matrix::zeros(n, c.d_model);
        for head in 0..c.head_count {
            let (qh, kh, vh) = (q.column_block(head * dh, dh), k.column_block(head * dh, dh), v.column_block(head * dh, dh));
            let res = match kernel {
                OracleKernel::Causal => naive_causal(&rotate_rows(&qh, 1e4)?, &rotate_rows(&kh, 1e4)?, &vh)?,
                OracleKernel::Registers { sigma } => {
                    naive_farsight(&rotate_rows(&qh, 1e4)?, &rotate_rows(&kh, 1e4)?, &vh, sigma)?
                }
                OracleKernel::Alibi => {
                    let slope = 2f64.powf(-8.0 * (head + 1) as f64 / c.head_count as f64);
                    naive_biased_causal(&qh, &kh, &vh, slope)?
                }
            };
            concat.set_column_block(head * dh, &res.output);
        }
        x = x.add(&matmul(&concat, &layer.attn.wo)?)?;
        let h = norm_rows(&x, &layer.norm2_gain, &layer.norm2_bias);
        let pre = matmul(&h, &layer.mlp_in)?;
        let act = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
            let z = pre[(i, j)] + layer.mlp_in_bias[j];
            0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())
        });
        let out = matmul(&act, &layer.mlp_out)?;
        x = Matrix::from_fn(n, c.d_model, |i, j| x[(i, j)] + out[(i, j)] + layer.mlp_out_bias[j]);
    }
    matmul(&norm_rows(&x, &model.final_gain, &model.final_bias), &model.lm_head)
}

/// Greedy continuation using [`oracle_forward`], smallest id on ties.
pub fn oracle_greedy(model: &ModelWeights, prompt: &[usize], kernel: OracleKernel, steps: usize) -> Result<Vec<usize>> {
    let mut ids = prompt.to_vec();
    for _ in 0..steps {
        let logits = oracle_forward(model, &ids, kernel)?;
        let last = logits.row(ids.len() - 1);
        let mut best = 0;
        for t in 1..last.len() {
            if last[t] > last[best] {
                best = t;
            }
        }
        ids.push(best);
    }
    Ok(ids[prompt.len()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_score_examples() {
        let z = Matrix::zeros(2, 2);
        let r = naive_farsight(&z, &z, &z, 0.8).unwrap();
        assert!((r.probs[(0, 0)] - 1.0 / (1.0 + (-0.8f64).exp())).abs() < 1e-15);
        assert_eq!(r.probs[(0, 1)], 0.0);
        assert_eq!(r.probs.row(1), &[0.5, 0.5]);

        let z3 = Matrix::zeros(3, 2);
        let c = naive_causal(&z3, &z3, &z3).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(c.probs.row(1), &[0.5, 0.5, 0.0]);
        assert!(c.probs.row(2).iter().all(|&p| (p - third).abs() < 1e-15));
        assert!(c.beta.iter().all(|&b| (b - 1.0).abs() < 1e-15));

        let one = Matrix::from_rows(&[[0.4, 2.0]]).unwrap();
        assert_eq!(naive_farsight(&one, &one, &one, 0.8).unwrap().probs, Matrix::identity(1));
    }

    #[test]
    fn shape_errors() {
        assert!(naive_causal(&Matrix::zeros(2, 2), &Matrix::zeros(3, 2), &Matrix::zeros(2, 2)).is_err());
        assert!(naive_farsight(&Matrix::zeros(0, 0), &Matrix::zeros(0, 0), &Matrix::zeros(0, 0), 1.0).is_err());
    }
}
