//! A small pre-norm transformer decoder used to exercise the attention
//! kernels end to end: synthetic weights, a forward pass that records every
//! head's attention, greedy/sampling/beam decoding and a binary model format.

mod decode;
mod io;

pub use decode::{argmax_logits, continuation_log_prob, decode, CacheMode, DecodeOptions, DecodeResult, StepSummary, Strategy};
pub use io::{load_model, model_digest, read_model, save_model, write_model, MODEL_MAGIC};

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionConfig, HeadProjections, MaskMode};
use crate::diagnostics::{ForwardTrace, HeadRecord};
use crate::error::{domain, Error, Result};
use crate::masks::RegisterSchedule;
use crate::numerics::{matmul, Matrix, SeededRng};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}

/// Token ids with a contiguous vision prefix followed by text tokens.
/// Positions are the 0-based indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    vision_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vision_len: usize) -> Result<Self> {
        if vision_len > ids.len() {
            return Err(domain(format!(
                "vision prefix {vision_len} longer than sequence {}",
                ids.len()
            )));
        }
        Ok(Self { ids, vision_len })
    }

    pub fn text(ids: Vec<usize>) -> Self {
        Self { ids, vision_len: 0 }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vision_len(&self) -> usize {
        self.vision_len
    }

    pub fn modality(&self) -> Vec<Modality> {
        (0..self.ids.len())
            .map(|i| if i < self.vision_len { Modality::Vision } else { Modality::Text })
            .collect()
    }

    /// Appends a generated (text) token.
    pub fn push(&mut self, id: usize) {
        self.ids.push(id);
    }

    pub fn with_appended(&self, extra: &[usize]) -> Self {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(extra);
        Self { ids, vision_len: self.vision_len }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some((pos, id)) = self.ids.iter().enumerate().find(|(_, &id)| id >= vocab_size) {
            return Err(Error::Input(format!(
                "token {id} at position {pos} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Shape of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub layer_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.head_count == 0 || self.layer_count == 0 {
            return Err(domain("model dimensions must all be at least 1"));
        }
        if self.d_model % self.head_count != 0 {
            return Err(domain(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.head_count
            )));
        }
        if (self.d_model / self.head_count) % 2 != 0 {
            return Err(domain(format!(
                "head dimension {} must be even for rotary embeddings",
                self.d_model / self.head_count
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.head_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1_gain: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    pub attn: HeadProjections,
    pub norm2_gain: Vec<f64>,
    pub norm2_bias: Vec<f64>,
    /// `d_model x 4 d_model`
    pub mlp_in: Matrix,
    pub mlp_in_bias: Vec<f64>,
    /// `4 d_model x d_model`
    pub mlp_out: Matrix,
    pub mlp_out_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab x d_model`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub final_bias: Vec<f64>,
    /// `d_model x vocab`
    pub lm_head: Matrix,
}

impl ModelWeights {
    /// Checks every tensor against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let bad = |what: &str| Err(Error::Dimension(format!("{what} has the wrong shape")));
        if self.embedding.shape() != (c.vocab_size, d) {
            return bad("embedding");
        }
        if self.lm_head.shape() != (d, c.vocab_size) {
            return bad("lm_head");
        }
        if self.final_gain.len() != d || self.final_bias.len() != d {
            return bad("final norm");
        }
        if self.layers.len() != c.layer_count {
            return Err(Error::Dimension(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.layer_count
            )));
        }
        for (l, w) in self.layers.iter().enumerate() {
            let sq = [&w.attn.wq, &w.attn.wk, &w.attn.wv, &w.attn.wo];
            if sq.iter().any(|m| m.shape() != (d, d))
                || w.mlp_in.shape() != (d, MLP_RATIO * d)
                || w.mlp_out.shape() != (MLP_RATIO * d, d)
                || w.mlp_in_bias.len() != MLP_RATIO * d
                || [&w.norm1_gain, &w.norm1_bias, &w.norm2_gain, &w.norm2_bias, &w.mlp_out_bias]
                    .iter()
                    .any(|v| v.len() != d)
            {
                return bad(&format!("layer {l}"));
            }
        }
        Ok(())
    }
}

/// Draws all projection matrices from a seeded `N(0, 1/d_model)`; norm gains
/// start at one and biases at zero.
pub fn generate_synthetic_model(config: ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let seed = config.seed.unwrap_or(0);
    let mut rng = SeededRng::new(seed);
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let embedding = Matrix::random_normal(config.vocab_size, d, scale, &mut rng);
    let layers = (0..config.layer_count)
        .map(|_| LayerWeights {
            norm1_gain: vec![1.0; d],
            norm1_bias: vec![0.0; d],
            attn: HeadProjections {
                wq: Matrix::random_normal(d, d, scale, &mut rng),
                wk: Matrix::random_normal(d, d, scale, &mut rng),
                wv: Matrix::random_normal(d, d, scale, &mut rng),
                wo: Matrix::random_normal(d, d, scale, &mut rng),
            },
            norm2_gain: vec![1.0; d],
            norm2_bias: vec![0.0; d],
            mlp_in: Matrix::random_normal(d, MLP_RATIO * d, scale, &mut rng),
            mlp_in_bias: vec![0.0; MLP_RATIO * d],
            mlp_out: Matrix::random_normal(MLP_RATIO * d, d, scale, &mut rng),
            mlp_out_bias: vec![0.0; d],
        })
        .collect();
    let lm_head = Matrix::random_normal(d, config.vocab_size, scale, &mut rng);
    Ok(ModelWeights {
        config: ModelConfig { seed: Some(seed), ..config },
        embedding,
        layers,
        final_gain: vec![1.0; d],
        final_bias: vec![0.0; d],
        lm_head,
    })
}

pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

pub(crate) fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&layer_norm_row(x.row(i), gain, bias));
    }
    out
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn mlp(x: &Matrix, w: &LayerWeights) -> Result<Matrix> {
    let mut hidden = matmul(x, &w.mlp_in)?;
    add_row_bias(&mut hidden, &w.mlp_in_bias);
    let hidden = hidden.map(gelu);
    let mut out = matmul(&hidden, &w.mlp_out)?;
    add_row_bias(&mut out, &w.mlp_out_bias);
    Ok(out)
}

pub(crate) fn embed(model: &ModelWeights, ids: &[usize]) -> Matrix {
    let mut x = Matrix::zeros(ids.len(), model.config.d_model);
    for (i, &id) in ids.iter().enumerate() {
        x.row_mut(i).copy_from_slice(model.embedding.row(id));
    }
    x
}

/// Logits for every position plus the attention trace of the pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `n x vocab`
    pub logits: Matrix,
    pub trace: ForwardTrace,
}

/// Full forward pass over `tokens`.
pub fn forward(
    model: &ModelWeights,
    tokens: &TokenSequence,
    mode: MaskMode,
    schedule: &RegisterSchedule,
) -> Result<ForwardOutput> {
    forward_with(model, tokens, &AttentionConfig::new(model.config.head_count, mode, *schedule))
}

/// Forward pass with an explicit attention configuration.
pub fn forward_with(
    model: &ModelWeights,
    tokens: &TokenSequence,
    attn: &AttentionConfig,
) -> Result<ForwardOutput> {
    tokens.validate(model.config.vocab_size)?;
    let mut x = embed(model, tokens.ids());
    let mut trace = ForwardTrace { layers: Vec::with_capacity(model.layers.len()) };
    for layer in &model.layers {
        let h = layer_norm(&x, &layer.norm1_gain, &layer.norm1_bias);
        let attn_out = multi_head_attention(&h, &layer.attn, attn)?;
        x = x.add(&attn_out.output)?;
        let h = layer_norm(&x, &layer.norm2_gain, &layer.norm2_bias);
        x = x.add(&mlp(&h, layer)?)?;
        trace.layers.push(
            attn_out
                .heads
                .into_iter()
                .map(|r| HeadRecord { probs: r.probs, beta: r.beta })
                .collect(),
        );
    }
    let h = layer_norm(&x, &model.final_gain, &model.final_bias);
    Ok(ForwardOutput { logits: matmul(&h, &model.lm_head)?, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn seven() -> ModelWeights {
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
    fn synthetic_model_is_deterministic() {
        let a = seven();
        assert_eq!(a, seven());
        let b = generate_synthetic_model(ModelConfig { seed: Some(8), ..a.config }).unwrap();
        assert_ne!(a.embedding, b.embedding);
        a.validate().unwrap();
    }

    #[test]
    fn invalid_dims_rejected() {
        let c = ModelConfig { vocab_size: 64, d_model: 32, head_count: 5, layer_count: 2, seed: None };
        assert!(matches!(generate_synthetic_model(c), Err(Error::Domain(_))));
        let c = ModelConfig { vocab_size: 64, d_model: 12, head_count: 4, layer_count: 2, seed: None };
        assert!(generate_synthetic_model(c).is_err());
    }

    #[test]
    fn forward_is_finite() {
        let m = seven();
        let toks = TokenSequence::new(vec![1, 5, 9, 63, 0, 2], 3).unwrap();
        for mode in MaskMode::ALL {
            let out = forward(&m, &toks, mode, &RegisterSchedule::default()).unwrap();
            assert_eq!(out.logits.shape(), (6, 64));
            assert!(out.logits.is_finite());
            assert_eq!(out.trace.layers.len(), 2);
            assert_eq!(out.trace.layers[0].len(), 4);
        }
    }

    #[test]
    fn single_token_forward() {
        let m = seven();
        let out =
            forward(&m, &TokenSequence::text(vec![3]), MaskMode::FarSight, &RegisterSchedule::default())
                .unwrap();
        assert_eq!(out.logits.shape(), (1, 64));
        for layer in &out.trace.layers {
            for h in layer {
                assert_eq!(h.probs, Matrix::identity(1));
            }
        }
    }

    #[test]
    fn out_of_vocab_rejected() {
        let m = seven();
        let r = forward(&m, &TokenSequence::text(vec![1, 64]), MaskMode::Causal, &RegisterSchedule::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn large_sigma_logits_match_causal() {
        let m = seven();
        let toks = TokenSequence::text(vec![4, 8, 15, 16, 23, 42]);
        let c = forward(&m, &toks, MaskMode::Causal, &RegisterSchedule::default()).unwrap();
        let f = forward(&m, &toks, MaskMode::FarSight, &RegisterSchedule::with_sigma(50.0).unwrap())
            .unwrap();
        assert!(c.logits.max_abs_diff(&f.logits).unwrap() < 1e-6);
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let m = seven();
        let s = RegisterSchedule::default();
        for mode in MaskMode::ALL {
            let a = forward(&m, &TokenSequence::text(vec![1, 2, 3, 4, 5]), mode, &s).unwrap();
            let b = forward(&m, &TokenSequence::text(vec![1, 2, 3, 60, 61]), mode, &s).unwrap();
            assert_eq!(a.logits.row_block(0, 3), b.logits.row_block(0, 3));
        }
    }

    #[test]
    fn token_sequence_tags() {
        let t = TokenSequence::new(vec![1, 2, 3], 2).unwrap();
        assert_eq!(t.modality(), vec![Modality::Vision, Modality::Vision, Modality::Text]);
        assert!(TokenSequence::new(vec![1], 2).is_err());
    }
}
