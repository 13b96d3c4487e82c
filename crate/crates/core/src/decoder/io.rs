//! Model container format.
//!
//! ```text
//! FARSIGHT-MODEL\n
//! {"format_version":1,"vocab_size":..,"d_model":..,"head_count":..,"layer_count":..,"seed":..,"tensor_count":..}\n
//! repeated tensor_count times:
//!   {"name":"..","shape":[..],"byte_len":..}\n
//!   byte_len bytes: row-major f64, little-endian
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LayerWeights, ModelConfig, ModelWeights, MLP_RATIO};
use crate::attention::HeadProjections;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODEL_MAGIC: &str = "FARSIGHT-MODEL";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    vocab_size: usize,
    d_model: usize,
    head_count: usize,
    layer_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    tensor_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    byte_len: usize,
}

enum Tensor<'a> {
    Matrix(&'a Matrix),
    Vector(&'a [f64]),
}

fn named_tensors(model: &ModelWeights) -> Vec<(String, Tensor<'_>)> {
    let mut out = vec![("embedding".to_string(), Tensor::Matrix(&model.embedding))];
    for (l, w) in model.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("norm1.gain"), Tensor::Vector(&w.norm1_gain)),
            (p("norm1.bias"), Tensor::Vector(&w.norm1_bias)),
            (p("attn.wq"), Tensor::Matrix(&w.attn.wq)),
            (p("attn.wk"), Tensor::Matrix(&w.attn.wk)),
            (p("attn.wv"), Tensor::Matrix(&w.attn.wv)),
            (p("attn.wo"), Tensor::Matrix(&w.attn.wo)),
            (p("norm2.gain"), Tensor::Vector(&w.norm2_gain)),
            (p("norm2.bias"), Tensor::Vector(&w.norm2_bias)),
            (p("mlp.in"), Tensor::Matrix(&w.mlp_in)),
            (p("mlp.in_bias"), Tensor::Vector(&w.mlp_in_bias)),
            (p("mlp.out"), Tensor::Matrix(&w.mlp_out)),
            (p("mlp.out_bias"), Tensor::Vector(&w.mlp_out_bias)),
        ]);
    }
    out.extend([
        ("final_norm.gain".to_string(), Tensor::Vector(&model.final_gain)),
        ("final_norm.bias".to_string(), Tensor::Vector(&model.final_bias)),
        ("lm_head".to_string(), Tensor::Matrix(&model.lm_head)),
    ]);
    out
}

/// Serializes a model to bytes.
pub fn write_model(model: &ModelWeights) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let tensors = named_tensors(model);
    let header = Header {
        format_version: FORMAT_VERSION,
        vocab_size: c.vocab_size,
        d_model: c.d_model,
        head_count: c.head_count,
        layer_count: c.layer_count,
        seed: c.seed,
        tensor_count: tensors.len(),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&serde_json::to_vec(&header).expect("header serializes"));
    buf.push(b'\n');
    for (name, t) in tensors {
        let (shape, data) = match t {
            Tensor::Matrix(m) => (vec![m.rows(), m.cols()], m.data()),
            Tensor::Vector(v) => (vec![v.len()], v),
        };
        let th = TensorHeader { name, shape, byte_len: data.len() * 8 };
        buf.extend_from_slice(&serde_json::to_vec(&th).expect("tensor header serializes"));
        buf.push(b'\n');
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_model(model: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    read_model(&fs::read(path)?)
}

/// Hex SHA-256 of the serialized model.
pub fn model_digest(model: &ModelWeights) -> Result<String> {
    Ok(hex::encode(Sha256::digest(write_model(model)?)))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format { offset, msg: msg.into() }
    }

    fn line(&mut self) -> Result<&'a [u8]> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err(start, "unterminated header line"))?;
        self.pos = start + end + 1;
        Ok(&rest[..end])
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let start = self.pos;
        if self.bytes.len() - start < len {
            return Err(self.err(
                start,
                format!("payload needs {len} bytes, {} remain", self.bytes.len() - start),
            ));
        }
        self.pos += len;
        Ok(&self.bytes[start..start + len])
    }
}

/// Parses a model from bytes. Never returns a partially filled model.
pub fn read_model(bytes: &[u8]) -> Result<ModelWeights> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != MODEL_MAGIC.as_bytes() {
        return Err(cur.err(0, "missing model magic"));
    }
    let header_at = cur.pos;
    let header: Header = serde_json::from_slice(cur.line()?)
        .map_err(|e| cur.err(header_at, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(cur.err(header_at, format!("unsupported format version {}", header.format_version)));
    }
    let config = ModelConfig {
        vocab_size: header.vocab_size,
        d_model: header.d_model,
        head_count: header.head_count,
        layer_count: header.layer_count,
        seed: header.seed,
    };
    config.validate().map_err(|e| cur.err(header_at, e.to_string()))?;

    let mut tensors: BTreeMap<String, (usize, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..header.tensor_count {
        let at = cur.pos;
        let th: TensorHeader = serde_json::from_slice(cur.line()?)
            .map_err(|e| cur.err(at, format!("bad tensor header: {e}")))?;
        let count: usize = th.shape.iter().product();
        if th.byte_len != count * 8 {
            return Err(cur.err(
                at,
                format!("tensor {} shape {:?} needs {} bytes, header says {}", th.name, th.shape, count * 8, th.byte_len),
            ));
        }
        let payload = cur.take(th.byte_len)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if tensors.insert(th.name.clone(), (at, th.shape, data)).is_some() {
            return Err(cur.err(at, format!("duplicate tensor {}", th.name)));
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(cur.pos, "trailing bytes after last tensor"));
    }

    let mut store = TensorStore { tensors, end: bytes.len() };
    let d = config.d_model;
    let v = config.vocab_size;
    let embedding = store.matrix("embedding", v, d)?;
    let mut layers = Vec::with_capacity(config.layer_count);
    for l in 0..config.layer_count {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerWeights {
            norm1_gain: store.vector(&p("norm1.gain"), d)?,
            norm1_bias: store.vector(&p("norm1.bias"), d)?,
            attn: HeadProjections {
                wq: store.matrix(&p("attn.wq"), d, d)?,
                wk: store.matrix(&p("attn.wk"), d, d)?,
                wv: store.matrix(&p("attn.wv"), d, d)?,
                wo: store.matrix(&p("attn.wo"), d, d)?,
            },
            norm2_gain: store.vector(&p("norm2.gain"), d)?,
            norm2_bias: store.vector(&p("norm2.bias"), d)?,
            mlp_in: store.matrix(&p("mlp.in"), d, MLP_RATIO * d)?,
            mlp_in_bias: store.vector(&p("mlp.in_bias"), MLP_RATIO * d)?,
            mlp_out: store.matrix(&p("mlp.out"), MLP_RATIO * d, d)?,
            mlp_out_bias: store.vector(&p("mlp.out_bias"), d)?,
        });
    }
    let final_gain = store.vector("final_norm.gain", d)?;
    let final_bias = store.vector("final_norm.bias", d)?;
    let lm_head = store.matrix("lm_head", d, v)?;
    if let Some((name, (at, _, _))) = store.tensors.into_iter().next() {
        return Err(Error::Format { offset: at, msg: format!("unexpected tensor {name}") });
    }
    let model = ModelWeights { config, embedding, layers, final_gain, final_bias, lm_head };
    model.validate()?;
    Ok(model)
}

/// Parsed tensors keyed by name: (header offset, shape, values).
struct TensorStore {
    tensors: BTreeMap<String, (usize, Vec<usize>, Vec<f64>)>,
    end: usize,
}

impl TensorStore {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (at, found, data) = self.tensors.remove(name).ok_or_else(|| Error::Format {
            offset: self.end,
            msg: format!("missing tensor {name}"),
        })?;
        if found != shape {
            return Err(Error::Format {
                offset: at,
                msg: format!("tensor {name} has shape {found:?}, expected {shape:?}"),
            });
        }
        Ok(data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.take(name, &[rows, cols])?)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.take(name, &[len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::generate_synthetic_model;

    fn small() -> ModelWeights {
        generate_synthetic_model(ModelConfig {
            vocab_size: 10,
            d_model: 8,
            head_count: 2,
            layer_count: 1,
            seed: Some(4),
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = write_model(&m).unwrap();
        let back = read_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_model(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = write_model(&small()).unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(read_model(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn inconsistent_byte_len_is_rejected() {
        let bytes = write_model(&small()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let needle = "\"shape\":[10,8],\"byte_len\":640";
        assert!(text.contains(needle));
        let pos = bytes.windows(needle.len()).position(|w| w == needle.as_bytes()).unwrap();
        let mut bad = bytes.clone();
        bad[pos..pos + needle.len()].copy_from_slice(b"\"shape\":[10,9],\"byte_len\":640");
        match read_model(&bad) {
            Err(Error::Format { offset, .. }) => assert!(offset < pos),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(model_digest(&small()).unwrap(), model_digest(&small()).unwrap());
        assert_eq!(model_digest(&small()).unwrap().len(), 64);
    }
}
