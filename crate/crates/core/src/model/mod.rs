//! Transformer encoder classifier with a pooler/dropout/classifier head.
//!
//! Architecture per sequence (only non-padding positions take part):
//!
//! ```text
//! x0 = E_tok[ids] + E_pos[positions]
//! for each block:
//!     x = x + Wo * Attn(LN1(x))              multi-head, scaled dot product
//!     x = x + W2 * gelu_tanh(W1 * LN2(x))    feed-forward width 4d
//! h  = LN_final(x)[0]                         sequence-start position
//! logits = Wc * dropout(tanh(Wp * h + bp)) + bc
//! ```
//!
//! All arithmetic is `f64`. Gradients are analytic (see `network`).

mod layers;
mod network;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{bce_with_logits, sigmoid, LayerNorm, Linear};
pub use network::Batch;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub classes: usize,
    pub dropout: f64,
    pub backbone_frozen: bool,
}

impl ModelConfig {
    /// Defaults: d = 128, L = 2, H = 4, dropout 0.25, backbone trainable.
    pub fn new(vocab_size: usize, max_len: usize, classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            dim: 128,
            blocks: 2,
            heads: 4,
            max_len,
            classes,
            dropout: 0.25,
            backbone_frozen: false,
        }
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("classes", self.classes),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.heads ({}) must divide model.dim ({})",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Backbone,
    Head,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderBlock {
    fn zeros(dim: usize, ff: usize) -> Self {
        EncoderBlock {
            norm1: LayerNorm::zeros(dim),
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
            norm2: LayerNorm::zeros(dim),
            ff_in: Linear::zeros(dim, ff),
            ff_out: Linear::zeros(ff, dim),
        }
    }
}

/// Every learnable tensor. Also used as the gradient and optimizer-moment
/// container, so all three share one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub pooler: Linear,
    pub classifier: Linear,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

// Expands to one callback per tensor in a fixed order; the order defines the
// checkpoint layout and the init stream.
macro_rules! each_tensor {
    ($p:expr, $f:ident, $slice:ident, $iter:ident $(, $m:ident)?) => {{
        let p = $p;
        {
            let t = & $($m)? p.token_embedding;
            let shape = t.shape().to_vec();
            $f("token_embedding".to_string(), Partition::Backbone, shape, t.$slice().expect("standard layout"));
        }
        {
            let t = & $($m)? p.position_embedding;
            let shape = t.shape().to_vec();
            $f("position_embedding".to_string(), Partition::Backbone, shape, t.$slice().expect("standard layout"));
        }
        for (i, b) in p.blocks.$iter().enumerate() {
            each_tensor!(@norm $f, format!("blocks.{i}.norm1"), Partition::Backbone, b.norm1, $slice $(, $m)?);
            each_tensor!(@linear $f, format!("blocks.{i}.query"), Partition::Backbone, b.query, $slice $(, $m)?);
            each_tensor!(@linear $f, format!("blocks.{i}.key"), Partition::Backbone, b.key, $slice $(, $m)?);
            each_tensor!(@linear $f, format!("blocks.{i}.value"), Partition::Backbone, b.value, $slice $(, $m)?);
            each_tensor!(@linear $f, format!("blocks.{i}.output"), Partition::Backbone, b.output, $slice $(, $m)?);
            each_tensor!(@norm $f, format!("blocks.{i}.norm2"), Partition::Backbone, b.norm2, $slice $(, $m)?);
            each_tensor!(@linear $f, format!("blocks.{i}.ff_in"), Partition::Backbone, b.ff_in, $slice $(, $m)?);
            each_tensor!(@linear $f, format!("blocks.{i}.ff_out"), Partition::Backbone, b.ff_out, $slice $(, $m)?);
        }
        each_tensor!(@norm $f, "final_norm".to_string(), Partition::Backbone, p.final_norm, $slice $(, $m)?);
        each_tensor!(@linear $f, "pooler".to_string(), Partition::Head, p.pooler, $slice $(, $m)?);
        each_tensor!(@linear $f, "classifier".to_string(), Partition::Head, p.classifier, $slice $(, $m)?);
    }};
    (@linear $f:ident, $name:expr, $part:expr, $l:expr, $slice:ident $(, $m:ident)?) => {{
        let name = $name;
        let w = & $($m)? $l.weight;
        let shape = w.shape().to_vec();
        $f(format!("{name}.weight"), $part, shape, w.$slice().expect("standard layout"));
        let b = & $($m)? $l.bias;
        let shape = b.shape().to_vec();
        $f(format!("{name}.bias"), $part, shape, b.$slice().expect("standard layout"));
    }};
    (@norm $f:ident, $name:expr, $part:expr, $l:expr, $slice:ident $(, $m:ident)?) => {{
        let name = $name;
        let g = & $($m)? $l.gain;
        let shape = g.shape().to_vec();
        $f(format!("{name}.gain"), $part, shape, g.$slice().expect("standard layout"));
        let s = & $($m)? $l.shift;
        let shape = s.shape().to_vec();
        $f(format!("{name}.shift"), $part, shape, s.$slice().expect("standard layout"));
    }};
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.dim;
        Parameters {
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            blocks: (0..config.blocks).map(|_| EncoderBlock::zeros(d, config.ff_dim())).collect(),
            final_norm: LayerNorm::zeros(d),
            pooler: Linear::zeros(d, d),
            classifier: Linear::zeros(d, config.classes),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        let mut push = |name, partition, shape, data| out.push(TensorRef { name, partition, shape, data });
        each_tensor!(self, push, as_slice, iter);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let mut push = |name, partition, shape, data| out.push(TensorMut { name, partition, shape, data });
        each_tensor!(self, push, as_slice_mut, iter_mut, mut);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &Parameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }
}

/// Gradients for the trainable tensors. In frozen mode backbone tensors have
/// no entries.
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Parameters,
    backbone_frozen: bool,
}

impl Gradients {
    /// All-zero gradients for every trainable tensor of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        Gradients {
            values: Parameters::zeros(config),
            backbone_frozen: config.backbone_frozen,
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries().into_iter().find(|t| t.name == name).map(|t| t.data)
    }

    pub fn entries(&self) -> Vec<TensorRef<'_>> {
        let frozen = self.backbone_frozen;
        self.values
            .tensors()
            .into_iter()
            .filter(|t| !(frozen && t.partition == Partition::Backbone))
            .collect()
    }

    pub fn is_trainable(&self, partition: Partition) -> bool {
        !(self.backbone_frozen && partition == Partition::Backbone)
    }

    /// Full-layout view; frozen tensors are all zero.
    pub fn values(&self) -> &Parameters {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl ModelState {
    /// Xavier-uniform matrices (half-width `sqrt(6 / (rows + cols))`), zero
    /// biases and shifts, unit gains. Tensors are drawn in layout order from
    /// one ChaCha8 stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in params.tensors_mut() {
            if t.name.ends_with(".gain") {
                t.data.fill(1.0);
            } else if t.shape.len() == 2 {
                let a = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                for x in t.data.iter_mut() {
                    *x = rng.random_range(-a..a);
                }
            }
        }
        Ok(ModelState {
            config: config.clone(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: CheckpointFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(raw)
    }

    pub fn write_checkpoint<W: Write>(&self, writer: W) -> Result<()> {
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|t| {
                if let Some(bad) = t.data.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Checkpoint(format!("{} holds non-finite value {bad}", t.name)));
                }
                Ok(CheckpointTensor {
                    name: t.name,
                    partition: t.partition,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        serde_json::to_writer(writer, &file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn from_checkpoint(raw: CheckpointFile) -> Result<Self> {
        if raw.format != CHECKPOINT_FORMAT || raw.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                raw.format, raw.version
            )));
        }
        raw.config.validate()?;
        let mut params = Parameters::zeros(&raw.config);
        let slots = params.tensors_mut();
        if slots.len() != raw.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                raw.tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(raw.tensors) {
            if slot.name != t.name || slot.shape != t.shape || slot.partition != t.partition {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} ({}) does not match expected {} {:?} ({})",
                    t.name,
                    t.shape,
                    t.partition.as_str(),
                    slot.name,
                    slot.shape,
                    slot.partition.as_str()
                )));
            }
            if t.data.len() != slot.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} has {} values", t.name, t.data.len())));
            }
            slot.data.copy_from_slice(&t.data);
        }
        Ok(ModelState {
            config: raw.config,
            params,
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "dxcode-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: one JSON object, tensors in layout order, row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointTensor {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Sigmoid probabilities and the indices with `p > threshold` (strict).
pub fn predict(logits: &[f64], threshold: f64) -> (Vec<f64>, BTreeSet<usize>) {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let predicted = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| i)
        .collect();
    (probs, predicted)
}
