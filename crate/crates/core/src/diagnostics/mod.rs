//! Measurements over attention traces: per-row surviving mass, attention
//! paid to the vision prefix as generation proceeds, attention mass on
//! designated outlier tokens, and side-by-side mode comparisons.

mod trace;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

pub use trace::{
    fmt_sig9, round_sig9, AttentionTrace, ForwardTrace, HeadRecord, TraceStep, TRACE_CSV_HEADER,
};

use crate::attention::{rope_decay_bound, MaskMode, RopeParams};
use crate::decoder::{decode, CacheMode, DecodeOptions, ModelWeights, Strategy, TokenSequence};
use crate::error::{domain, Error, Result};
use crate::masks::RegisterSchedule;

/// Default multiple of the uniform share above which a column is flagged by
/// [`detect_outliers`].
pub const DEFAULT_OUTLIER_FACTOR: f64 = 5.0;

/// Mean attention mass from the newest row onto the vision prefix, one value
/// per generated step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCurve {
    pub values: Vec<f64>,
}

impl DecayCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,visual_mass\n");
        for (t, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{},{}\n", t + 1, fmt_sig9(*v)));
        }
        s
    }
}

/// Newest-row attention mass on a set of outlier columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub outliers: Vec<usize>,
    pub per_step: Vec<f64>,
    pub aggregate: f64,
}

/// Surviving mass of every row for one head of one forward pass.
pub fn beta_sequence(trace: &AttentionTrace, layer: usize, head: usize, step: usize) -> Result<Vec<f64>> {
    Ok(trace.record(layer, head, step)?.beta.clone())
}

/// Mean over layers and heads of `f(newest row of that head)`, per step.
fn per_step_newest_row(trace: &AttentionTrace, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    trace
        .steps
        .iter()
        .map(|s| {
            let mut total = 0.0;
            let mut count = 0usize;
            for layer in &s.forward.layers {
                for rec in layer {
                    total += f(rec.probs.row(rec.probs.rows() - 1));
                    count += 1;
                }
            }
            if count == 0 { 0.0 } else { total / count as f64 }
        })
        .collect()
}

/// Per step, the newest row's surviving mass averaged over layers and heads.
pub fn newest_row_beta(trace: &AttentionTrace) -> Vec<f64> {
    per_step_newest_row(trace, |row| row.iter().sum())
}

pub fn visual_attention_curve(trace: &AttentionTrace, vision_prefix_len: usize) -> Result<DecayCurve> {
    if vision_prefix_len > trace.prompt_len {
        return Err(domain(format!(
            "vision prefix {vision_prefix_len} longer than prompt {}",
            trace.prompt_len
        )));
    }
    Ok(DecayCurve {
        values: per_step_newest_row(trace, |row| row[..vision_prefix_len].iter().sum()),
    })
}

/// Longest sequence the trace knows about, including the final generated
/// token that was never fed back.
fn max_seq_len(trace: &AttentionTrace) -> usize {
    trace.steps.iter().map(|s| s.seq_len).max().unwrap_or(0).max(trace.modality.len())
}

pub fn collapse_metric(trace: &AttentionTrace, outliers: &[usize]) -> Result<CollapseReport> {
    let len = max_seq_len(trace);
    if let Some(&bad) = outliers.iter().find(|&&i| i >= len) {
        return Err(Error::Index { index: bad, len });
    }
    let set: BTreeSet<usize> = outliers.iter().copied().collect();
    let per_step = per_step_newest_row(trace, |row| {
        set.iter().take_while(|&&j| j < row.len()).map(|&j| row[j]).sum()
    });
    let aggregate =
        if per_step.is_empty() { 0.0 } else { per_step.iter().sum::<f64>() / per_step.len() as f64 };
    Ok(CollapseReport { outliers: set.into_iter().collect(), per_step, aggregate })
}

/// Columns whose mean incoming attention at `step`, measured relative to the
/// uniform share `1 / (i + 1)` of each attending row `i`, exceeds `factor`.
///
/// A helper only; nothing in this crate applies it implicitly.
pub fn detect_outliers(trace: &AttentionTrace, step: usize, factor: f64) -> Result<Vec<usize>> {
    let s = step
        .checked_sub(1)
        .and_then(|i| trace.steps.get(i))
        .ok_or(Error::Index { index: step, len: trace.steps.len() })?;
    let n = s.seq_len;
    let mut ratio = vec![0.0; n];
    let mut heads = 0usize;
    for layer in &s.forward.layers {
        for rec in layer {
            heads += 1;
            for (j, r) in ratio.iter_mut().enumerate() {
                let mean: f64 =
                    (j..n).map(|i| rec.probs[(i, j)] * (i + 1) as f64).sum::<f64>() / (n - j) as f64;
                *r += mean;
            }
        }
    }
    Ok((0..n).filter(|&j| heads > 0 && ratio[j] / heads as f64 > factor).collect())
}

/// Per-mode results of a comparison run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub generated: Vec<usize>,
    pub decay_curve: DecayCurve,
    pub collapse: CollapseReport,
    /// Newest-row surviving mass per step.
    pub newest_beta: Vec<f64>,
    /// Per-row surviving mass at the last step, averaged over layers and heads.
    pub final_row_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub sigma: f64,
    pub vision_prefix_len: usize,
    pub steps: usize,
    pub modes: BTreeMap<MaskMode, ModeReport>,
}

/// One flattened line of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: MaskMode,
    pub step: usize,
    pub visual_mass: f64,
    pub outlier_mass: f64,
    pub newest_beta: f64,
}

impl ComparisonReport {
    pub fn rows(&self) -> Vec<ComparisonRow> {
        let mut out = Vec::new();
        for (&mode, r) in &self.modes {
            for t in 0..self.steps {
                out.push(ComparisonRow {
                    mode,
                    step: t + 1,
                    visual_mass: r.decay_curve.values[t],
                    outlier_mass: r.collapse.per_step[t],
                    newest_beta: r.newest_beta[t],
                });
            }
        }
        out
    }

    /// JSON with every float rounded to 9 significant digits.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_json_floats(&mut v);
        serde_json::to_string_pretty(&v).expect("json value serializes")
    }
}

/// Rounds every non-integer number in a JSON value to 9 significant digits.
pub fn round_json_floats(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64().and_then(|x| serde_json::Number::from_f64(round_sig9(x))) {
                *n = x;
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json_floats),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json_floats),
        _ => {}
    }
}

fn final_row_beta(trace: &AttentionTrace) -> Vec<f64> {
    let Some(last) = trace.steps.last() else { return Vec::new() };
    let n = last.seq_len;
    let mut out = vec![0.0; n];
    let mut count = 0usize;
    for layer in &last.forward.layers {
        for rec in layer {
            count += 1;
            for (o, b) in out.iter_mut().zip(&rec.beta) {
                *o += b;
            }
        }
    }
    out.iter().map(|v| v / count.max(1) as f64).collect()
}

/// Greedy-decodes `steps` tokens under each mask mode and tabulates the decay
/// curve, outlier mass and surviving mass side by side.
pub fn compare_modes(
    model: &ModelWeights,
    prompt: &TokenSequence,
    schedule: &RegisterSchedule,
    steps: usize,
    outliers: &[usize],
) -> Result<ComparisonReport> {
    if steps == 0 {
        return Err(domain("comparison needs at least one step"));
    }
    let mut modes = BTreeMap::new();
    for mode in MaskMode::ALL {
        let r = decode(model, prompt, &DecodeOptions::new(Strategy::Greedy, mode, *schedule, steps))?;
        modes.insert(
            mode,
            ModeReport {
                decay_curve: visual_attention_curve(&r.trace, prompt.vision_len())?,
                collapse: collapse_metric(&r.trace, outliers)?,
                newest_beta: newest_row_beta(&r.trace),
                final_row_beta: final_row_beta(&r.trace),
                generated: r.generated,
            },
        );
    }
    Ok(ComparisonReport { sigma: schedule.sigma, vision_prefix_len: prompt.vision_len(), steps, modes })
}

/// One decay rate's effect on attention to the vision prefix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sigma: f64,
    /// Mean visual mass of the newest row over all steps.
    pub mean_visual_mass: f64,
    /// Mean normalized entropy of the newest row's distribution restricted to
    /// the vision prefix; lower is more concentrated.
    pub visual_entropy: f64,
}

/// Greedy register-attention decodes at each decay rate.
pub fn decay_rate_sweep(
    model: &ModelWeights,
    prompt: &TokenSequence,
    sigmas: &[f64],
    steps: usize,
) -> Result<Vec<SweepRow>> {
    let v = prompt.vision_len();
    if v < 2 {
        return Err(domain("sweep needs a vision prefix of at least two tokens"));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let schedule = RegisterSchedule::with_sigma(sigma)?;
            let r = decode(
                model,
                prompt,
                &DecodeOptions::new(Strategy::Greedy, MaskMode::FarSight, schedule, steps),
            )?;
            let curve = visual_attention_curve(&r.trace, v)?;
            let entropy = per_step_newest_row(&r.trace, |row| {
                let mass: f64 = row[..v].iter().sum();
                let h: f64 = row[..v]
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| {
                        let q = p / mass;
                        -q * q.ln()
                    })
                    .sum();
                h / (v as f64).ln()
            });
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
            Ok(SweepRow { sigma, mean_visual_mass: mean(&curve.values), visual_entropy: mean(&entropy) })
        })
        .collect()
}

/// How far a cached decode drifts from the full-recompute decode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheDivergence {
    pub mode: MaskMode,
    pub recompute: Vec<usize>,
    pub cached: Vec<usize>,
    /// First step (1-based) at which the tokens differ.
    pub first_mismatch: Option<usize>,
    /// Largest gap in chosen-token log-probability before the first mismatch.
    pub max_log_prob_gap: f64,
}

pub fn cache_divergence(
    model: &ModelWeights,
    prompt: &TokenSequence,
    mode: MaskMode,
    schedule: &RegisterSchedule,
    steps: usize,
) -> Result<CacheDivergence> {
    let mut opts = DecodeOptions::new(Strategy::Greedy, mode, *schedule, steps);
    let full = decode(model, prompt, &opts)?;
    opts.cache = CacheMode::KvCache;
    let cached = decode(model, prompt, &opts)?;
    let first_mismatch =
        full.generated.iter().zip(&cached.generated).position(|(a, b)| a != b).map(|i| i + 1);
    let upto = first_mismatch.map_or(steps, |m| m - 1);
    let max_log_prob_gap = full.steps[..upto]
        .iter()
        .zip(&cached.steps)
        .map(|(a, b)| (a.log_prob - b.log_prob).abs())
        .fold(0.0, f64::max);
    Ok(CacheDivergence {
        mode,
        recompute: full.generated,
        cached: cached.generated,
        first_mismatch,
        max_log_prob_gap,
    })
}

/// Relative bound on RoPE score magnitude for distances `0..=max_distance`.
pub fn rope_decay_profile(head_dim: usize, theta_base: f64, max_distance: usize) -> Result<Vec<f64>> {
    let p = RopeParams { theta_base, head_dim };
    (0..=max_distance).map(|d| rope_decay_bound(d, &p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{causal_attention, farsight_attention, AttentionInputs};
    use crate::decoder::{generate_synthetic_model, ModelConfig};
    use crate::numerics::Matrix;

    fn single_head_trace(n: usize, mode: MaskMode, sigma: f64) -> AttentionTrace {
        let inputs =
            AttentionInputs::new(Matrix::zeros(n, 2), Matrix::zeros(n, 2), Matrix::zeros(n, 2)).unwrap();
        let r = match mode {
            MaskMode::FarSight => {
                farsight_attention(&inputs, &RegisterSchedule::with_sigma(sigma).unwrap()).unwrap()
            }
            _ => causal_attention(&inputs).unwrap(),
        };
        AttentionTrace {
            modality: vec![crate::decoder::Modality::Text; n],
            prompt_len: n,
            steps: vec![TraceStep {
                step: 1,
                seq_len: n,
                forward: ForwardTrace { layers: vec![vec![HeadRecord { probs: r.probs, beta: r.beta }]] },
            }],
        }
    }

    fn seven() -> ModelWeights {
        generate_synthetic_model(ModelConfig {
            vocab_size: 64,
            d_model: 32,
            head_count: 4,
            layer_count: 2,
            seed: Some(7),
        })
        .unwrap()
    }

    #[test]
    fn beta_sequence_examples() {
        let t = single_head_trace(3, MaskMode::FarSight, 0.8);
        let b = beta_sequence(&t, 0, 0, 1).unwrap();
        let e = (-0.8f64).exp();
        let expected = [1.0 / (1.0 + e + e * e), 2.0 / (2.0 + e), 1.0];
        for (x, y) in b.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in b.iter().zip([0.60561, 0.81655, 1.0]) {
            assert!((x - y).abs() < 1e-5);
        }
        assert_eq!(beta_sequence(&single_head_trace(1, MaskMode::FarSight, 0.8), 0, 0, 1).unwrap(), vec![1.0]);
        let c = beta_sequence(&single_head_trace(5, MaskMode::Causal, 0.8), 0, 0, 1).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(beta_sequence(&t, 0, 0, 2).is_err());
        assert!(beta_sequence(&t, 1, 0, 1).is_err());
    }

    #[test]
    fn visual_curve_edges() {
        let m = seven();
        let p = TokenSequence::new(vec![3, 1, 4, 1, 5], 3).unwrap();
        let r = decode(&m, &p, &DecodeOptions::new(Strategy::Greedy, MaskMode::FarSight, RegisterSchedule::default(), 4))
            .unwrap();
        let zero = visual_attention_curve(&r.trace, 0).unwrap();
        assert_eq!(zero.values, vec![0.0; 4]);
        let full = visual_attention_curve(&r.trace, 5).unwrap();
        assert!((full.values[0] - newest_row_beta(&r.trace)[0]).abs() < 1e-12);
        assert!(visual_attention_curve(&r.trace, 6).is_err());
        assert_eq!(full.to_csv().lines().count(), 5);
    }

    #[test]
    fn collapse_partition_identity() {
        let m = seven();
        let p = TokenSequence::new(vec![3, 1, 4, 1, 5, 9], 2).unwrap();
        let r = decode(&m, &p, &DecodeOptions::new(Strategy::Greedy, MaskMode::FarSight, RegisterSchedule::default(), 5))
            .unwrap();
        let total = r.tokens.len();
        let curve = visual_attention_curve(&r.trace, 2).unwrap();
        let rest: Vec<usize> = (2..total).collect();
        let col = collapse_metric(&r.trace, &rest).unwrap();
        let beta = newest_row_beta(&r.trace);
        for t in 0..5 {
            assert!((curve.values[t] + col.per_step[t] - beta[t]).abs() < 1e-12);
        }
        let none = collapse_metric(&r.trace, &[]).unwrap();
        assert!(none.per_step.iter().all(|&v| v == 0.0));
        let all: Vec<usize> = (0..total).collect();
        let everything = collapse_metric(&r.trace, &all).unwrap();
        for t in 0..5 {
            assert!((everything.per_step[t] - beta[t]).abs() < 1e-12);
        }
        assert!(collapse_metric(&r.trace, &[total]).is_err());
    }

    #[test]
    fn sink_column_attracts_mass() {
        // One key with a large norm aligned with every query.
        let n = 16;
        let d = 4;
        let q = Matrix::from_fn(n, d, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let k = Matrix::from_fn(n, d, |i, j| match (i, j) {
            (0, 0) => 10.0,
            (_, 0) => 0.1,
            _ => 0.3,
        });
        let inputs = AttentionInputs::new(q, k, Matrix::zeros(n, d)).unwrap();
        let r = causal_attention(&inputs).unwrap();
        let trace = AttentionTrace {
            modality: vec![crate::decoder::Modality::Text; n],
            prompt_len: n,
            steps: vec![TraceStep {
                step: 1,
                seq_len: n,
                forward: ForwardTrace { layers: vec![vec![HeadRecord { probs: r.probs, beta: r.beta }]] },
            }],
        };
        let rep = collapse_metric(&trace, &[0]).unwrap();
        assert!(rep.per_step[0] > 1.0 / n as f64);
        assert!(detect_outliers(&trace, 1, DEFAULT_OUTLIER_FACTOR).unwrap().contains(&0));
    }

    #[test]
    fn compare_modes_schema() {
        let m = seven();
        let p = TokenSequence::new(vec![1, 2, 3, 4], 2).unwrap();
        let rep = compare_modes(&m, &p, &RegisterSchedule::default(), 3, &[0]).unwrap();
        assert_eq!(rep.rows().len(), 9);
        assert!(compare_modes(&m, &p, &RegisterSchedule::default(), 0, &[]).is_err());
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert!(json["modes"]["farsight"]["decay_curve"]["values"].is_array());
    }

    #[test]
    fn large_sigma_curves_agree() {
        let m = seven();
        let p = TokenSequence::new(vec![5, 6, 7, 8, 9], 3).unwrap();
        let rep = compare_modes(&m, &p, &RegisterSchedule::with_sigma(50.0).unwrap(), 6, &[]).unwrap();
        let c = &rep.modes[&MaskMode::Causal].decay_curve.values;
        let f = &rep.modes[&MaskMode::FarSight].decay_curve.values;
        for (a, b) in c.iter().zip(f) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cached_causal_never_diverges() {
        let m = seven();
        let p = TokenSequence::text(vec![1, 2, 3, 4, 5, 6]);
        let d = cache_divergence(&m, &p, MaskMode::Causal, &RegisterSchedule::default(), 6).unwrap();
        assert_eq!(d.first_mismatch, None);
        assert!(d.max_log_prob_gap < 1e-12);
        let f = cache_divergence(&m, &p, MaskMode::FarSight, &RegisterSchedule::default(), 6).unwrap();
        assert_eq!(f.recompute.len(), 6);
    }

    #[test]
    fn sweep_rows() {
        let m = seven();
        let p = TokenSequence::new(vec![1, 2, 3, 4, 5, 6], 4).unwrap();
        let rows = decay_rate_sweep(&m, &p, &[0.1, 0.8], 4).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_visual_mass)));
        assert!(rows.iter().all(|r| (0.0..=1.0 + 1e-12).contains(&r.visual_entropy)));
    }

    #[test]
    fn rope_profile_decays() {
        let p = rope_decay_profile(64, 10_000.0, 256).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[256] < p[1]);
    }
}
