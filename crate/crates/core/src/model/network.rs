//! Batched forward and backward passes.
//!
//! Rows are processed independently. Gradients are accumulated per fixed-size
//! chunk of rows and the chunk results are summed in chunk order, so the
//! result does not depend on how many worker threads rayon uses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    attention_backward, attention_forward, bce_with_logits, gelu, gelu_grad, sigmoid, AttentionCache,
    LayerNormCache, Linear,
};
use super::{EncoderBlock, Gradients, ModelConfig, ModelState, Parameters};
use crate::error::{Error, Result};
use crate::tokenizer::{PAD_ID, START_ID};

const CHUNK_ROWS: usize = 4;

/// Padded id matrix plus a mask of real (non-padding) positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    ids: Array2<u32>,
    mask: Array2<bool>,
}

impl Batch {
    pub fn new(ids: Array2<u32>, mask: Array2<bool>) -> Result<Self> {
        if ids.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "ids {:?} and mask {:?} differ in shape",
                ids.dim(),
                mask.dim()
            )));
        }
        Ok(Batch { ids, mask })
    }

    /// Right-pads every sequence to the longest one.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Array2::from_elem((seqs.len(), width), PAD_ID);
        let mut mask = Array2::from_elem((seqs.len(), width), false);
        for (r, seq) in seqs.iter().enumerate() {
            for (c, &id) in seq.as_ref().iter().enumerate() {
                ids[[r, c]] = id;
                mask[[r, c]] = true;
            }
        }
        Batch { ids, mask }
    }

    pub fn rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    pub fn ids(&self) -> &Array2<u32> {
        &self.ids
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    fn sequence(&self, r: usize) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (c, (&id, &m)) in self.ids.row(r).iter().zip(self.mask.row(r)).enumerate() {
            if m {
                ids.push(id);
                positions.push(c);
            }
        }
        (ids, positions)
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.width() > config.max_len {
            return Err(Error::Shape(format!(
                "batch width {} exceeds max_len {}",
                self.width(),
                config.max_len
            )));
        }
        for r in 0..self.rows() {
            if !self.mask[[r, 0]] || self.ids[[r, 0]] != START_ID {
                return Err(Error::Shape(format!("row {r} does not begin with the sequence-start token")));
            }
            if let Some(&bad) = self.ids.row(r).iter().find(|&&id| id as usize >= config.vocab_size) {
                return Err(Error::Shape(format!(
                    "row {r} has id {bad} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
        }
        Ok(())
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttentionCache,
    context: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

struct SequenceCache {
    ids: Vec<u32>,
    positions: Vec<usize>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    len: usize,
}

fn block_forward(block: &EncoderBlock, heads: usize, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
    let (h1, ln1) = block.norm1.forward(x.view());
    let q = block.query.forward(h1.view());
    let k = block.key.forward(h1.view());
    let v = block.value.forward(h1.view());
    let (context, attn) = attention_forward(q.view(), k.view(), v.view(), heads);
    let mid = &x + &block.output.forward(context.view());
    let (h2, ln2) = block.norm2.forward(mid.view());
    let ff_pre = block.ff_in.forward(h2.view());
    let ff_act = ff_pre.mapv(gelu);
    let out = &mid + &block.ff_out.forward(ff_act.view());
    let cache = BlockCache {
        ln1,
        h1,
        q,
        k,
        v,
        attn,
        context,
        ln2,
        h2,
        ff_pre,
        ff_act,
    };
    (out, cache)
}

fn block_backward(block: &EncoderBlock, cache: &BlockCache, dout: Array2<f64>, grad: &mut EncoderBlock) -> Array2<f64> {
    let dact = block.ff_out.backward(cache.ff_act.view(), dout.view(), &mut grad.ff_out);
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre)
        .and(&cache.ff_pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    let dh2 = block.ff_in.backward(cache.h2.view(), dpre.view(), &mut grad.ff_in);
    let dmid = dout + block.norm2.backward(&cache.ln2, dh2.view(), &mut grad.norm2);
    let dcontext = block.output.backward(cache.context.view(), dmid.view(), &mut grad.output);
    let (dq, dk, dv) = attention_backward(cache.q.view(), cache.k.view(), cache.v.view(), &cache.attn, dcontext.view());
    let mut dh1 = block.query.backward(cache.h1.view(), dq.view(), &mut grad.query);
    dh1 += &block.key.backward(cache.h1.view(), dk.view(), &mut grad.key);
    dh1 += &block.value.backward(cache.h1.view(), dv.view(), &mut grad.value);
    dmid + block.norm1.backward(&cache.ln1, dh1.view(), &mut grad.norm1)
}

/// Backbone output at the sequence-start position.
fn encode(params: &Parameters, config: &ModelConfig, ids: Vec<u32>, positions: Vec<usize>) -> (Array1<f64>, SequenceCache) {
    let n = ids.len();
    let mut x = Array2::zeros((n, config.dim));
    for (i, (&id, &pos)) in ids.iter().zip(&positions).enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&params.token_embedding.row(id as usize));
        row += &params.position_embedding.row(pos);
    }
    let mut blocks = Vec::with_capacity(config.blocks);
    for block in &params.blocks {
        let (out, cache) = block_forward(block, config.heads, x);
        blocks.push(cache);
        x = out;
    }
    let (normed, final_ln) = params.final_norm.forward(x.view());
    let features = normed.row(0).to_owned();
    (
        features,
        SequenceCache {
            ids,
            positions,
            blocks,
            final_ln,
            len: n,
        },
    )
}

fn encode_backward(params: &Parameters, cache: &SequenceCache, dfeatures: ArrayView1<f64>, grad: &mut Parameters) {
    let mut dnormed = Array2::zeros((cache.len, dfeatures.len()));
    dnormed.row_mut(0).assign(&dfeatures);
    let mut dx = params.final_norm.backward(&cache.final_ln, dnormed.view(), &mut grad.final_norm);
    for ((block, bc), bg) in params.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
        dx = block_backward(block, bc, dx, bg);
    }
    for (i, (&id, &pos)) in cache.ids.iter().zip(&cache.positions).enumerate() {
        let d = dx.row(i);
        let mut t = grad.token_embedding.row_mut(id as usize);
        t += &d;
        let mut p = grad.position_embedding.row_mut(pos);
        p += &d;
    }
}

/// Inverted-dropout multipliers for one row: `0` or `1 / (1 - rate)`. The
/// stream is keyed by `(seed, row)` so any subset of rows can be replayed.
fn dropout_mask(rate: f64, dim: usize, seed: u64, row: usize) -> Option<Array1<f64>> {
    if rate == 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    let keep = 1.0 / (1.0 - rate);
    Some(Array1::from_shape_fn(dim, |_| if rng.random::<f64>() < rate { 0.0 } else { keep }))
}

struct HeadCache {
    features: Array1<f64>,
    pooled: Array1<f64>,
    mask: Option<Array1<f64>>,
    dropped: Array1<f64>,
}

fn head_forward(params: &Parameters, features: Array1<f64>, mask: Option<Array1<f64>>) -> (Array1<f64>, HeadCache) {
    let pooled = (params.pooler.weight.dot(&features) + &params.pooler.bias).mapv(f64::tanh);
    let dropped = match &mask {
        Some(m) => &pooled * m,
        None => pooled.clone(),
    };
    let logits = params.classifier.weight.dot(&dropped) + &params.classifier.bias;
    (
        logits,
        HeadCache {
            features,
            pooled,
            mask,
            dropped,
        },
    )
}

fn as_row(v: ArrayView1<'_, f64>) -> ArrayView2<'_, f64> {
    v.insert_axis(Axis(0))
}

fn head_backward(params: &Parameters, cache: &HeadCache, dlogits: ArrayView1<f64>, grad: &mut Parameters) -> Array1<f64> {
    Linear::backward_params(as_row(cache.dropped.view()), as_row(dlogits), &mut grad.classifier);
    let mut dpooled = params.classifier.weight.t().dot(&dlogits);
    if let Some(m) = &cache.mask {
        dpooled *= m;
    }
    let dpre = &dpooled * &cache.pooled.mapv(|p| 1.0 - p * p);
    Linear::backward_params(as_row(cache.features.view()), as_row(dpre.view()), &mut grad.pooler);
    params.pooler.weight.t().dot(&dpre)
}

fn row_loss(logits: &Array1<f64>, target: ArrayView1<f64>, scale: f64) -> (f64, Array1<f64>) {
    let loss = logits.iter().zip(target).map(|(&z, &t)| bce_with_logits(z, t)).sum();
    let dlogits = Array1::from_iter(logits.iter().zip(target).map(|(&z, &t)| (sigmoid(z) - t) * scale));
    (loss, dlogits)
}

impl ModelState {
    fn row_mask(&self, train_mode: bool, seed: u64, row: usize) -> Option<Array1<f64>> {
        if train_mode {
            dropout_mask(self.config.dropout, self.config.dim, seed, row)
        } else {
            None
        }
    }

    /// Raw logits, `rows x classes`.
    pub fn forward(&self, batch: &Batch, train_mode: bool, dropout_seed: u64) -> Result<Array2<f64>> {
        let features = self.features(batch)?;
        self.head_logits(features.view(), train_mode, dropout_seed)
    }

    /// Backbone output at the sequence-start position, `rows x dim`.
    pub fn features(&self, batch: &Batch) -> Result<Array2<f64>> {
        batch.check(&self.config)?;
        let rows: Vec<Array1<f64>> = (0..batch.rows())
            .into_par_iter()
            .map(|r| {
                let (ids, positions) = batch.sequence(r);
                encode(&self.params, &self.config, ids, positions).0
            })
            .collect();
        let mut out = Array2::zeros((batch.rows(), self.config.dim));
        for (r, f) in rows.into_iter().enumerate() {
            out.row_mut(r).assign(&f);
        }
        Ok(out)
    }

    /// Head applied to precomputed backbone features.
    pub fn head_logits(&self, features: ArrayView2<f64>, train_mode: bool, dropout_seed: u64) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let mut out = Array2::zeros((features.nrows(), self.config.classes));
        for (r, f) in features.rows().into_iter().enumerate() {
            let mask = self.row_mask(train_mode, dropout_seed, r);
            out.row_mut(r).assign(&head_forward(&self.params, f.to_owned(), mask).0);
        }
        Ok(out)
    }

    /// Mean binary cross entropy over all `rows x classes` entries and its
    /// gradient. With a frozen backbone only the head is differentiated.
    pub fn backward(
        &self,
        batch: &Batch,
        targets: ArrayView2<f64>,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(f64, Gradients)> {
        batch.check(&self.config)?;
        self.check_targets(batch.rows(), targets)?;
        if batch.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if self.config.backbone_frozen {
            let features = self.features(batch)?;
            return self.head_backward(features.view(), targets, train_mode, dropout_seed);
        }
        let scale = 1.0 / (batch.rows() * self.config.classes) as f64;
        let chunks: Vec<(f64, Parameters)> = chunk_ranges(batch.rows())
            .into_par_iter()
            .map(|(start, end)| {
                let mut grad = Parameters::zeros(&self.config);
                let mut loss = 0.0;
                for r in start..end {
                    let (ids, positions) = batch.sequence(r);
                    let (features, seq) = encode(&self.params, &self.config, ids, positions);
                    let mask = self.row_mask(train_mode, dropout_seed, r);
                    let (logits, head) = head_forward(&self.params, features, mask);
                    let (l, dlogits) = row_loss(&logits, targets.row(r), scale);
                    loss += l;
                    let dfeatures = head_backward(&self.params, &head, dlogits.view(), &mut grad);
                    encode_backward(&self.params, &seq, dfeatures.view(), &mut grad);
                }
                (loss, grad)
            })
            .collect();
        Ok(reduce(chunks, scale, false))
    }

    /// Loss and head-only gradients from precomputed backbone features. Gives
    /// the same numbers as `backward` in frozen mode.
    pub fn head_backward(
        &self,
        features: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(f64, Gradients)> {
        self.check_features(features)?;
        self.check_targets(features.nrows(), targets)?;
        if features.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        let scale = 1.0 / (features.nrows() * self.config.classes) as f64;
        let mut grad = Parameters::zeros(&ModelConfig {
            // Backbone tensors are never touched here; keep them tiny.
            vocab_size: 1,
            max_len: 1,
            blocks: 0,
            ..self.config.clone()
        });
        let mut loss = 0.0;
        for (r, f) in features.rows().into_iter().enumerate() {
            let mask = self.row_mask(train_mode, dropout_seed, r);
            let (logits, head) = head_forward(&self.params, f.to_owned(), mask);
            let (l, dlogits) = row_loss(&logits, targets.row(r), scale);
            loss += l;
            head_backward(&self.params, &head, dlogits.view(), &mut grad);
        }
        let mut values = Parameters::zeros(&self.config);
        values.pooler = grad.pooler;
        values.classifier = grad.classifier;
        Ok((
            loss * scale,
            Gradients {
                values,
                backbone_frozen: true,
            },
        ))
    }

    fn check_features(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.config.dim {
            return Err(Error::Shape(format!(
                "features have {} columns, model dim is {}",
                features.ncols(),
                self.config.dim
            )));
        }
        Ok(())
    }

    fn check_targets(&self, rows: usize, targets: ArrayView2<f64>) -> Result<()> {
        if targets.dim() != (rows, self.config.classes) {
            return Err(Error::Shape(format!(
                "targets {:?} do not match batch {} x classes {}",
                targets.dim(),
                rows,
                self.config.classes
            )));
        }
        Ok(())
    }
}

fn chunk_ranges(rows: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(rows)))
        .collect()
}

fn reduce(chunks: Vec<(f64, Parameters)>, scale: f64, frozen: bool) -> (f64, Gradients) {
    let mut iter = chunks.into_iter();
    let (mut loss, mut values) = iter.next().expect("at least one row");
    for (l, g) in iter {
        loss += l;
        values.accumulate(&g);
    }
    (
        loss * scale,
        Gradients {
            values,
            backbone_frozen: frozen,
        },
    )
}
