//! Attention kernels: plain causal softmax, register attention, an ALiBi
//! baseline, rotary embeddings, multi-head wiring and an analytic backward
//! pass for register attention.
//!
//! Register attention computes, per row `i` of an `n`-token sequence,
//!
//! ```text
//! W[i] = [ s(i,0), ..., s(i,i), -slope, -2 slope, ..., -(n-1-i) slope ]
//! p    = softmax(W[i])            (one joint softmax over the full row)
//! out  = sum_{j <= i} p[j] v[j]   (register columns are dropped, not renormalized)
//! ```
//!
//! so the surviving mass `beta[i] = sum_{j <= i} p[j]` is below one for every
//! row except the last.

mod grad;
mod rope;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use grad::{farsight_attention_grad, AttentionGrads};
pub use rope::{apply_rope, rope_decay_bound, rope_rotate, rope_score, RopeParams};

use crate::error::{dim, Error, Result};
use crate::masks::{head_slopes, RegisterSchedule};
use crate::numerics::{dot, matmul, softmax_row, Matrix};

/// Which attention kernel a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Causal,
    #[serde(rename = "farsight")]
    FarSight,
    Alibi,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Causal, MaskMode::FarSight, MaskMode::Alibi];

    /// Whether Q/K are rotated before scoring. ALiBi uses additive biases instead.
    pub fn uses_rope(self) -> bool {
        !matches!(self, MaskMode::Alibi)
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Causal => "causal",
            MaskMode::FarSight => "farsight",
            MaskMode::Alibi => "alibi",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskMode::Causal),
            "farsight" => Ok(MaskMode::FarSight),
            "alibi" => Ok(MaskMode::Alibi),
            other => Err(Error::Input(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Deliberate kernel defects, used to check that the property suite is not
/// vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFault {
    /// Registers get `+(j - i) * slope` instead of a negative bias.
    FlipRegisterSign,
    /// Register probabilities are kept after the softmax.
    SkipRemask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub scale: f64,
}

impl AttentionInputs {
    /// Uses the usual `1 / sqrt(d)` score scale.
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let inputs = Self { q, k, v, scale };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.q.shape();
        if n == 0 || d == 0 {
            return Err(dim(format!("attention needs n >= 1 and d >= 1, got {n}x{d}")));
        }
        if self.k.shape() != (n, d) || self.v.rows() != n || self.v.cols() == 0 {
            return Err(dim(format!(
                "mismatched Q {:?}, K {:?}, V {:?}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    /// Scaled score of query `i` against key `j`.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        dot(self.q.row(i), self.k.row(j)) * self.scale
    }
}

/// Output, final probabilities and surviving mass per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub output: Matrix,
    pub probs: Matrix,
    pub beta: Vec<f64>,
}

/// Shared row loop. `row_logits(i)` returns the full softmax row; only the
/// first `i + 1` entries survive unless `keep_all` is set.
fn run_rows(
    inputs: &AttentionInputs,
    keep_all: bool,
    mut row_logits: impl FnMut(usize) -> Vec<f64>,
) -> Result<AttentionResult> {
    inputs.validate()?;
    let n = inputs.len();
    let dv = inputs.v.cols();
    let mut probs = Matrix::zeros(n, n);
    let mut output = Matrix::zeros(n, dv);
    let mut beta = Vec::with_capacity(n);
    for i in 0..n {
        let p = softmax_row(&row_logits(i))?;
        let kept = if keep_all { p.len() } else { i + 1 };
        let mut mass = 0.0;
        let out_row = output.row_mut(i);
        for (j, &pj) in p.iter().take(kept).enumerate() {
            mass += pj;
            for (o, &vj) in out_row.iter_mut().zip(inputs.v.row(j)) {
                *o += pj * vj;
            }
        }
        probs.row_mut(i)[..kept].copy_from_slice(&p[..kept]);
        beta.push(mass);
    }
    Ok(AttentionResult { output, probs, beta })
}

/// Standard causal softmax attention.
pub fn causal_attention(inputs: &AttentionInputs) -> Result<AttentionResult> {
    run_rows(inputs, false, |i| (0..=i).map(|j| inputs.score(i, j)).collect())
}

/// Causal attention with ALiBi biases `-slope * (i - j)` on the lower triangle.
pub fn alibi_attention(inputs: &AttentionInputs, slope: f64) -> Result<AttentionResult> {
    run_rows(inputs, false, |i| {
        (0..=i).map(|j| inputs.score(i, j) - slope * (i - j) as f64).collect()
    })
}

/// Register attention with the schedule's uniform decay rate (head 0's slope
/// in per-head mode).
pub fn farsight_attention(
    inputs: &AttentionInputs,
    schedule: &RegisterSchedule,
) -> Result<AttentionResult> {
    schedule.validate()?;
    let slope = schedule.slope_for_head(0)?;
    farsight_with_slope(inputs, slope, schedule.pseudocode_scaling, None)
}

/// Register attention for an explicit slope, optionally with an injected
/// defect.
pub fn farsight_with_slope(
    inputs: &AttentionInputs,
    slope: f64,
    pseudocode_scaling: bool,
    fault: Option<KernelFault>,
) -> Result<AttentionResult> {
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(crate::error::domain(format!("register slope must be positive, got {slope}")));
    }
    let n = inputs.len();
    let valid_gain = if pseudocode_scaling { slope } else { 1.0 };
    let register_sign = if fault == Some(KernelFault::FlipRegisterSign) { 1.0 } else { -1.0 };
    run_rows(inputs, fault == Some(KernelFault::SkipRemask), |i| {
        (0..n)
            .map(|j| {
                if j <= i {
                    inputs.score(i, j) * valid_gain
                } else {
                    register_sign * (j - i) as f64 * slope
                }
            })
            .collect()
    })
}

/// Splits row `row` (0-based) of the joint softmax into the surviving part
/// `alpha` (columns `0..=row`) and the register part `gamma` (the rest).
pub fn farsight_row_decomposition(
    inputs: &AttentionInputs,
    schedule: &RegisterSchedule,
    row: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    inputs.validate()?;
    schedule.validate()?;
    let n = inputs.len();
    if row >= n {
        return Err(Error::Index { index: row, len: n });
    }
    let slope = schedule.slope_for_head(0)?;
    let gain = if schedule.pseudocode_scaling { slope } else { 1.0 };
    let logits: Vec<f64> = (0..n)
        .map(|j| if j <= row { inputs.score(row, j) * gain } else { -((j - row) as f64) * slope })
        .collect();
    let mut p = softmax_row(&logits)?;
    let gamma = p.split_off(row + 1);
    Ok((p, gamma))
}

/// Projection weights for one attention block. All are `d_model x d_model`;
/// head `h` owns columns `h * d_head .. (h + 1) * d_head` of Q/K/V.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl HeadProjections {
    pub fn identity(d_model: usize) -> Self {
        let id = Matrix::identity(d_model);
        Self { wq: id.clone(), wk: id.clone(), wv: id.clone(), wo: id }
    }
}

/// Result of a multi-head block: the projected output plus every head's
/// kernel result.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadOutput {
    pub output: Matrix,
    pub heads: Vec<AttentionResult>,
}

/// Everything a multi-head block needs beyond its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub head_count: usize,
    pub mode: MaskMode,
    pub schedule: RegisterSchedule,
    pub rope_base: f64,
    pub fault: Option<KernelFault>,
}

impl AttentionConfig {
    pub fn new(head_count: usize, mode: MaskMode, schedule: RegisterSchedule) -> Self {
        Self { head_count, mode, schedule, rope_base: 10_000.0, fault: None }
    }
}

/// Runs one head's kernel on already projected (and rotated) inputs.
pub fn head_kernel(
    inputs: &AttentionInputs,
    head: usize,
    config: &AttentionConfig,
) -> Result<AttentionResult> {
    match config.mode {
        MaskMode::Causal => causal_attention(inputs),
        MaskMode::Alibi => alibi_attention(inputs, head_slopes(config.head_count)?[head]),
        MaskMode::FarSight => farsight_with_slope(
            inputs,
            config.schedule.slope_for_head(head)?,
            config.schedule.pseudocode_scaling,
            config.fault,
        ),
    }
}

/// Splits `q`, `k`, `v` (already projected, `n x d_model`) into per-head inputs,
/// rotating Q/K when the mode uses RoPE.
pub fn split_heads(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    config: &AttentionConfig,
) -> Result<Vec<AttentionInputs>> {
    let d_model = q.cols();
    if config.head_count == 0 || d_model % config.head_count != 0 {
        return Err(dim(format!(
            "d_model {d_model} is not divisible by {} heads",
            config.head_count
        )));
    }
    let d_head = d_model / config.head_count;
    let rope = RopeParams { theta_base: config.rope_base, head_dim: d_head };
    (0..config.head_count)
        .map(|h| {
            let (mut qh, mut kh) =
                (q.column_block(h * d_head, d_head), k.column_block(h * d_head, d_head));
            if config.mode.uses_rope() {
                qh = apply_rope(&qh, 0, &rope)?;
                kh = apply_rope(&kh, 0, &rope)?;
            }
            AttentionInputs::new(qh, kh, v.column_block(h * d_head, d_head))
        })
        .collect()
}

/// Multi-head attention over `x` (`n x d_model`).
pub fn multi_head_attention(
    x: &Matrix,
    weights: &HeadProjections,
    config: &AttentionConfig,
) -> Result<MultiHeadOutput> {
    config.schedule.validate()?;
    let q = matmul(x, &weights.wq)?;
    let k = matmul(x, &weights.wk)?;
    let v = matmul(x, &weights.wv)?;
    let per_head = split_heads(&q, &k, &v, config)?;
    let d_head = x.cols() / config.head_count;
    let mut concat = Matrix::zeros(x.rows(), x.cols());
    let mut heads = Vec::with_capacity(config.head_count);
    for (h, inputs) in per_head.iter().enumerate() {
        let res = head_kernel(inputs, h, config)?;
        concat.set_column_block(h * d_head, &res.output);
        heads.push(res);
    }
    Ok(MultiHeadOutput { output: matmul(&concat, &weights.wo)?, heads })
}
