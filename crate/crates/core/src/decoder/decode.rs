use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_rope, head_kernel, split_heads, AttentionConfig, MaskMode, RopeParams,
};
use crate::diagnostics::{AttentionTrace, TraceStep};
use crate::error::{domain, Result};
use crate::masks::{head_slopes, RegisterSchedule};
use crate::numerics::{dot, log_sum_exp, matmul, softmax_row, Matrix, SeededRng};

use super::{embed, forward_with, layer_norm, mlp, ModelWeights, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
    Beam { width: usize },
}

/// How each step obtains the newest row's logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Rerun the whole sequence every step. Register counts track the live
    /// length, so earlier rows are re-normalized as the sequence grows.
    #[default]
    Recompute,
    /// Keep per-layer K/V and only process the newest token. Exact for the
    /// causal and ALiBi kernels; under register attention the prompt rows keep
    /// their prefill-time registers.
    KvCache,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub mode: MaskMode,
    pub schedule: RegisterSchedule,
    pub max_new_tokens: usize,
    pub cache: CacheMode,
    pub record_trace: bool,
}

impl DecodeOptions {
    pub fn new(strategy: Strategy, mode: MaskMode, schedule: RegisterSchedule, max_new_tokens: usize) -> Self {
        Self { strategy, mode, schedule, max_new_tokens, cache: CacheMode::Recompute, record_trace: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(domain("max_new_tokens must be at least 1"));
        }
        match self.strategy {
            Strategy::Sample { temperature, .. } if !(temperature > 0.0 && temperature.is_finite()) => {
                return Err(domain(format!("temperature must be positive, got {temperature}")));
            }
            Strategy::Beam { width: 0 } => return Err(domain("beam width must be at least 1")),
            Strategy::Beam { .. } if self.cache == CacheMode::KvCache => {
                return Err(domain("beam search runs with full recompute only"));
            }
            _ => {}
        }
        self.schedule.validate()
    }
}

/// Summary of the logits that produced one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub token: usize,
    /// Untempered model log-probability of `token`.
    pub log_prob: f64,
    pub max_logit: f64,
    pub log_normalizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Prompt followed by the generated tokens.
    pub tokens: TokenSequence,
    pub generated: Vec<usize>,
    pub steps: Vec<StepSummary>,
    pub cumulative_log_prob: f64,
    /// One entry per forward pass. Empty for `CacheMode::KvCache` or when
    /// tracing is off.
    pub trace: AttentionTrace,
}

fn summarize(logits: &[f64], token: usize) -> StepSummary {
    let lse = log_sum_exp(logits);
    StepSummary {
        token,
        log_prob: logits[token] - lse,
        max_logit: logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        log_normalizer: lse,
    }
}

/// Largest logit; ties go to the smaller id.
pub fn argmax_logits(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, rng: &mut SeededRng) -> Result<usize> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax_row(&scaled)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

/// Auto-regressive generation from `prompt`.
pub fn decode(model: &ModelWeights, prompt: &TokenSequence, options: &DecodeOptions) -> Result<DecodeResult> {
    options.validate()?;
    model.validate()?;
    prompt.validate(model.config.vocab_size)?;
    let attn = AttentionConfig::new(model.config.head_count, options.mode, options.schedule);
    match options.strategy {
        Strategy::Beam { width } => beam_search(model, prompt, &attn, width, options),
        _ => sequential(model, prompt, &attn, options),
    }
}

fn sequential(
    model: &ModelWeights,
    prompt: &TokenSequence,
    attn: &AttentionConfig,
    options: &DecodeOptions,
) -> Result<DecodeResult> {
    let mut rng = match options.strategy {
        Strategy::Sample { seed, .. } => Some(SeededRng::new(seed)),
        _ => None,
    };
    let mut seq = prompt.clone();
    let mut trace = AttentionTrace { modality: Vec::new(), prompt_len: prompt.len(), steps: Vec::new() };
    let mut steps = Vec::with_capacity(options.max_new_tokens);
    let mut session = match options.cache {
        CacheMode::KvCache => Some(KvSession::new(model, *attn)),
        CacheMode::Recompute => None,
    };
    let mut cached_logits = match session.as_mut() {
        Some(s) => Some(s.prefill(prompt)?),
        None => None,
    };

    for t in 1..=options.max_new_tokens {
        let logits: Vec<f64> = match cached_logits.take() {
            Some(l) => l,
            None => {
                let out = forward_with(model, &seq, attn)?;
                if options.record_trace {
                    trace.steps.push(TraceStep { step: t, seq_len: seq.len(), forward: out.trace });
                }
                out.logits.row(seq.len() - 1).to_vec()
            }
        };
        let token = match (options.strategy, rng.as_mut()) {
            (Strategy::Sample { temperature, .. }, Some(rng)) => sample(&logits, temperature, rng)?,
            _ => argmax_logits(&logits),
        };
        steps.push(summarize(&logits, token));
        seq.push(token);
        if t < options.max_new_tokens {
            if let Some(s) = session.as_mut() {
                cached_logits = Some(s.step(token)?);
            }
        }
    }
    trace.modality = seq.modality();
    let generated = seq.ids()[prompt.len()..].to_vec();
    Ok(DecodeResult {
        cumulative_log_prob: steps.iter().map(|s| s.log_prob).sum(),
        tokens: seq,
        generated,
        steps,
        trace,
    })
}

struct Beam {
    generated: Vec<usize>,
    score: f64,
    steps: Vec<StepSummary>,
}

fn beam_search(
    model: &ModelWeights,
    prompt: &TokenSequence,
    attn: &AttentionConfig,
    width: usize,
    options: &DecodeOptions,
) -> Result<DecodeResult> {
    let mut beams = vec![Beam { generated: Vec::new(), score: 0.0, steps: Vec::new() }];
    for _ in 0..options.max_new_tokens {
        let mut candidates: Vec<(usize, usize, f64, StepSummary)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let seq = prompt.with_appended(&beam.generated);
            let out = forward_with(model, &seq, attn)?;
            let logits = out.logits.row(seq.len() - 1);
            for token in 0..logits.len() {
                let s = summarize(logits, token);
                candidates.push((b, token, beam.score + s.log_prob, s));
            }
        }
        // Best score first; ties toward the lexicographically smaller sequence.
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let sa = beams[a.0].generated.iter().chain(std::iter::once(&a.1));
                let sb = beams[b.0].generated.iter().chain(std::iter::once(&b.1));
                sa.cmp(sb)
            })
        });
        candidates.truncate(width);
        beams = candidates
            .into_iter()
            .map(|(b, token, score, s)| {
                let mut generated = beams[b].generated.clone();
                generated.push(token);
                let mut steps = beams[b].steps.clone();
                steps.push(s);
                Beam { generated, score, steps }
            })
            .collect();
    }
    let best = beams.into_iter().next().expect("beam width is at least 1");

    // Replay the winning prefix so the trace matches a recompute decode.
    let mut trace = AttentionTrace { modality: Vec::new(), prompt_len: prompt.len(), steps: Vec::new() };
    if options.record_trace {
        for t in 0..best.generated.len() {
            let seq = prompt.with_appended(&best.generated[..t]);
            let out = forward_with(model, &seq, attn)?;
            trace.steps.push(TraceStep { step: t + 1, seq_len: seq.len(), forward: out.trace });
        }
    }
    let tokens = prompt.with_appended(&best.generated);
    trace.modality = tokens.modality();
    Ok(DecodeResult {
        tokens,
        generated: best.generated,
        cumulative_log_prob: best.steps.iter().map(|s| s.log_prob).sum(),
        steps: best.steps,
        trace,
    })
}

/// Incremental decoder state: rotated keys and values per layer and head.
struct KvSession<'a> {
    model: &'a ModelWeights,
    attn: AttentionConfig,
    keys: Vec<Vec<Matrix>>,
    values: Vec<Vec<Matrix>>,
    len: usize,
}

impl<'a> KvSession<'a> {
    fn new(model: &'a ModelWeights, attn: AttentionConfig) -> Self {
        let empty = vec![vec![Matrix::zeros(0, 0); attn.head_count]; model.layers.len()];
        Self { model, attn, keys: empty.clone(), values: empty, len: 0 }
    }

    /// Full pass over the prompt; returns the last row's logits.
    fn prefill(&mut self, prompt: &TokenSequence) -> Result<Vec<f64>> {
        let d_head = self.model.config.head_dim();
        let mut x = embed(self.model, prompt.ids());
        for (l, layer) in self.model.layers.iter().enumerate() {
            let h = layer_norm(&x, &layer.norm1_gain, &layer.norm1_bias);
            let q = matmul(&h, &layer.attn.wq)?;
            let k = matmul(&h, &layer.attn.wk)?;
            let v = matmul(&h, &layer.attn.wv)?;
            let heads = split_heads(&q, &k, &v, &self.attn)?;
            let mut concat = Matrix::zeros(x.rows(), x.cols());
            for (hd, inputs) in heads.into_iter().enumerate() {
                let res = head_kernel(&inputs, hd, &self.attn)?;
                concat.set_column_block(hd * d_head, &res.output);
                self.keys[l][hd] = inputs.k;
                self.values[l][hd] = inputs.v;
            }
            x = x.add(&matmul(&concat, &layer.attn.wo)?)?;
            let h = layer_norm(&x, &layer.norm2_gain, &layer.norm2_bias);
            x = x.add(&mlp(&h, layer)?)?;
        }
        self.len = prompt.len();
        self.logits_of_last(&x)
    }

    /// Appends `token` at the next position; returns its logits.
    fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if token >= cfg.vocab_size {
            return Err(crate::Error::Input(format!("token {token} outside vocabulary")));
        }
        let pos = self.len;
        let d_head = cfg.head_dim();
        let rope = RopeParams { theta_base: self.attn.rope_base, head_dim: d_head };
        let slopes = head_slopes(self.attn.head_count)?;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut x = embed(self.model, &[token]);
        for (l, layer) in self.model.layers.iter().enumerate() {
            let h = layer_norm(&x, &layer.norm1_gain, &layer.norm1_bias);
            let q = matmul(&h, &layer.attn.wq)?;
            let k = matmul(&h, &layer.attn.wk)?;
            let v = matmul(&h, &layer.attn.wv)?;
            let mut concat = Matrix::zeros(1, cfg.d_model);
            for hd in 0..self.attn.head_count {
                let (mut qh, mut kh) =
                    (q.column_block(hd * d_head, d_head), k.column_block(hd * d_head, d_head));
                if self.attn.mode.uses_rope() {
                    qh = apply_rope(&qh, pos, &rope)?;
                    kh = apply_rope(&kh, pos, &rope)?;
                }
                self.keys[l][hd].push_row(kh.row(0))?;
                self.values[l][hd].push_row(v.column_block(hd * d_head, d_head).row(0))?;
                let keys = &self.keys[l][hd];
                let values = &self.values[l][hd];
                // The newest row has no register columns in any mode.
                let gain = match self.attn.mode {
                    MaskMode::FarSight if self.attn.schedule.pseudocode_scaling => {
                        self.attn.schedule.slope_for_head(hd)?
                    }
                    _ => 1.0,
                };
                let logits: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let s = dot(qh.row(0), keys.row(j)) * scale;
                        match self.attn.mode {
                            MaskMode::Alibi => s - slopes[hd] * (pos - j) as f64,
                            _ => s * gain,
                        }
                    })
                    .collect();
                let p = softmax_row(&logits)?;
                let mut out = vec![0.0; d_head];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vj) in out.iter_mut().zip(values.row(j)) {
                        *o += pj * vj;
                    }
                }
                concat.row_mut(0)[hd * d_head..(hd + 1) * d_head].copy_from_slice(&out);
            }
            x = x.add(&matmul(&concat, &layer.attn.wo)?)?;
            let h = layer_norm(&x, &layer.norm2_gain, &layer.norm2_bias);
            x = x.add(&mlp(&h, layer)?)?;
        }
        self.len += 1;
        self.logits_of_last(&x)
    }

    fn logits_of_last(&self, x: &Matrix) -> Result<Vec<f64>> {
        let last = x.row_block(x.rows() - 1, 1);
        let h = layer_norm(&last, &self.model.final_gain, &self.model.final_bias);
        Ok(matmul(&h, &self.model.lm_head)?.into_data())
    }
}

/// Log-probability the model assigns to `continuation` after `prompt`,
/// rescoring every token with a fresh forward pass.
pub fn continuation_log_prob(
    model: &ModelWeights,
    prompt: &TokenSequence,
    continuation: &[usize],
    attn: &AttentionConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..continuation.len() {
        let seq = prompt.with_appended(&continuation[..t]);
        let out = forward_with(model, &seq, attn)?;
        total += summarize(out.logits.row(seq.len() - 1), continuation[t]).log_prob;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{generate_synthetic_model, ModelConfig};

    fn model(seed: u64) -> ModelWeights {
        generate_synthetic_model(ModelConfig {
            vocab_size: 64,
            d_model: 32,
            head_count: 4,
            layer_count: 2,
            seed: Some(seed),
        })
        .unwrap()
    }

    fn opts(strategy: Strategy, mode: MaskMode) -> DecodeOptions {
        DecodeOptions::new(strategy, mode, RegisterSchedule::default(), 8)
    }

    #[test]
    fn argmax_prefers_smaller_id_on_ties() {
        assert_eq!(argmax_logits(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_logits(&[0.0]), 0);
    }

    #[test]
    fn width_one_beam_is_greedy() {
        let m = model(7);
        let p = TokenSequence::new(vec![1, 2, 3], 2).unwrap();
        for mode in MaskMode::ALL {
            let g = decode(&m, &p, &opts(Strategy::Greedy, mode)).unwrap();
            let b = decode(&m, &p, &opts(Strategy::Beam { width: 1 }, mode)).unwrap();
            assert_eq!(g.generated, b.generated);
            assert_eq!(g.generated.len(), 8);
            assert_eq!(g.trace, b.trace);
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let m = model(7);
        let p = TokenSequence::text(vec![5, 6]);
        let o = opts(Strategy::Sample { temperature: 1.0, seed: 9 }, MaskMode::FarSight);
        let a = decode(&m, &p, &o).unwrap();
        assert_eq!(a.generated, decode(&m, &p, &o).unwrap().generated);
        let o2 = opts(Strategy::Sample { temperature: 1.0, seed: 10 }, MaskMode::FarSight);
        let _ = decode(&m, &p, &o2).unwrap();
    }

    #[test]
    fn trace_covers_each_step() {
        let m = model(7);
        let p = TokenSequence::new(vec![1, 2, 3, 4], 2).unwrap();
        let r = decode(&m, &p, &opts(Strategy::Greedy, MaskMode::FarSight)).unwrap();
        assert_eq!(r.trace.steps.len(), 8);
        for (t, s) in r.trace.steps.iter().enumerate() {
            assert_eq!(s.step, t + 1);
            assert_eq!(s.seq_len, 4 + t);
            assert_eq!(s.forward.seq_len(), 4 + t);
        }
        assert_eq!(r.trace.modality.len(), 12);
    }

    #[test]
    fn kv_cache_matches_recompute_for_causal() {
        let m = model(3);
        let p = TokenSequence::text(vec![9, 8, 7, 6, 5]);
        for mode in [MaskMode::Causal, MaskMode::Alibi] {
            let full = decode(&m, &p, &opts(Strategy::Greedy, mode)).unwrap();
            let mut o = opts(Strategy::Greedy, mode);
            o.cache = CacheMode::KvCache;
            let cached = decode(&m, &p, &o).unwrap();
            assert_eq!(full.generated, cached.generated);
            for (a, b) in full.steps.iter().zip(&cached.steps) {
                assert!((a.log_prob - b.log_prob).abs() < 1e-12);
            }
            assert!(cached.trace.steps.is_empty());
        }
    }

    #[test]
    fn beam_scores_at_least_greedy() {
        let m = model(11);
        let p = TokenSequence::text(vec![1, 2, 3]);
        let g = decode(&m, &p, &opts(Strategy::Greedy, MaskMode::FarSight)).unwrap();
        let b = decode(&m, &p, &opts(Strategy::Beam { width: 4 }, MaskMode::FarSight)).unwrap();
        assert!(b.cumulative_log_prob >= g.cumulative_log_prob - 1e-12);
        let attn = AttentionConfig::new(4, MaskMode::FarSight, RegisterSchedule::default());
        let rescored = continuation_log_prob(&m, &p, &b.generated, &attn).unwrap();
        assert!((rescored - b.cumulative_log_prob).abs() < 1e-9);
    }

    #[test]
    fn invalid_options() {
        let m = model(7);
        let p = TokenSequence::text(vec![1]);
        let mut o = opts(Strategy::Greedy, MaskMode::Causal);
        o.max_new_tokens = 0;
        assert!(decode(&m, &p, &o).is_err());
        assert!(decode(&m, &p, &opts(Strategy::Beam { width: 0 }, MaskMode::Causal)).is_err());
        assert!(decode(&m, &p, &opts(Strategy::Sample { temperature: 0.0, seed: 1 }, MaskMode::Causal)).is_err());
        let mut o = opts(Strategy::Beam { width: 2 }, MaskMode::Causal);
        o.cache = CacheMode::KvCache;
        assert!(decode(&m, &p, &o).is_err());
    }
}
