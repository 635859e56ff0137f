//! Mini-batch training with AdamW, linear warmup to a constant learning
//! rate, and early stopping on validation weighted F1.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_input, Corpus, Section};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_indices, EvalReport};
use crate::model::{predict, Batch, Gradients, ModelState, Parameters, Partition};
use crate::tokenizer::{TokenizedExample, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Probability cut-off used for validation predictions.
    pub threshold: f64,
    /// Drives batch shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 3e-5,
            warmup_steps: 5000,
            max_epochs: 50,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("train.batch_size, max_epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "train.patience ({}) exceeds max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("train.learning_rate and epsilon must be positive, weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and beta2 must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("train.threshold must be in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }
}

/// `peak * min(1, step / warmup)`; constant at the peak afterwards.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    if config.warmup_steps == 0 || step >= config.warmup_steps {
        config.learning_rate
    } else {
        config.learning_rate * (step as f64 / config.warmup_steps as f64)
    }
}

/// AdamW with decoupled weight decay (decay applied before the moment step).
#[derive(Debug, Clone)]
pub struct AdamW {
    first: Parameters,
    second: Parameters,
    updates: i32,
}

impl AdamW {
    pub fn new(state: &ModelState) -> Self {
        AdamW {
            first: Parameters::zeros(&state.config),
            second: Parameters::zeros(&state.config),
            updates: 0,
        }
    }

    /// Updates every tensor that has a gradient entry; frozen tensors are not
    /// touched at all, decay included.
    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients, lr: f64, config: &TrainConfig) {
        self.updates += 1;
        let c1 = 1.0 - config.beta1.powi(self.updates);
        let c2 = 1.0 - config.beta2.powi(self.updates);
        let shrink = 1.0 - lr * config.weight_decay;
        let params = state.params.tensors_mut();
        let first = self.first.tensors_mut();
        let second = self.second.tensors_mut();
        let grad = grads.values().tensors();
        for (((p, m), v), g) in params.into_iter().zip(first).zip(second).zip(grad) {
            if !grads.is_trainable(p.partition) {
                continue;
            }
            for (((x, m), v), &g) in p.data.iter_mut().zip(m.data.iter_mut()).zip(v.data.iter_mut()).zip(g.data) {
                *x *= shrink;
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
    }
}

/// Tokenized inputs with their label-index sets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<TokenizedExample>,
    pub labels: Vec<BTreeSet<usize>>,
}

impl Dataset {
    /// Builds inputs from `fields` of the named records. Target width is the
    /// full inventory.
    pub fn from_records(corpus: &Corpus, ids: &[&str], vocab: &Vocabulary, fields: &[Section]) -> Result<Self> {
        let inventory = corpus.inventory();
        let mut out = Dataset::default();
        for id in ids {
            let record = corpus
                .get(id)
                .ok_or_else(|| Error::InvalidRecord {
                    record_id: id.to_string(),
                    message: "not in corpus".into(),
                })?;
            let labels = inventory.indices(record.codes.iter())?;
            let text = build_input(record, fields)?;
            out.examples
                .push(TokenizedExample::new(vocab.encode(&text), &labels, inventory.len()));
            out.labels.push(labels);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn batch(&self, rows: &[usize]) -> (Batch, Array2<f64>) {
        let seqs: Vec<&[u32]> = rows.iter().map(|&r| self.examples[r].ids.as_slice()).collect();
        let classes = self.examples.first().map_or(0, |e| e.target.len());
        let targets = Array2::from_shape_fn((rows.len(), classes), |(i, c)| self.examples[rows[i]].target[c]);
        (Batch::from_sequences(&seqs), targets)
    }
}

const INFERENCE_BATCH: usize = 64;

/// Inference-mode logits for every example, in order.
pub fn dataset_logits(state: &ModelState, data: &Dataset) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), state.config.classes));
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(INFERENCE_BATCH) {
        let (batch, _) = data.batch(chunk);
        let logits = state.forward(&batch, false, 0)?;
        for (i, &r) in chunk.iter().enumerate() {
            out.row_mut(r).assign(&logits.row(i));
        }
    }
    Ok(out)
}

pub fn logits_to_sets(logits: &Array2<f64>, threshold: f64) -> Vec<BTreeSet<usize>> {
    logits
        .rows()
        .into_iter()
        .map(|row| predict(row.as_slice().expect("standard layout"), threshold).1)
        .collect()
}

/// Thresholded predictions for every example.
pub fn predict_dataset(state: &ModelState, data: &Dataset, threshold: f64) -> Result<Vec<BTreeSet<usize>>> {
    Ok(logits_to_sets(&dataset_logits(state, data)?, threshold))
}

/// Evaluates `state` on `data`, naming classes by `codes`.
pub fn evaluate_dataset(state: &ModelState, data: &Dataset, codes: &[String], threshold: f64) -> Result<EvalReport> {
    let predictions = predict_dataset(state, data, threshold)?;
    evaluate_indices(&data.labels, &predictions, codes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stop_reason: StopReason,
    pub steps: u64,
}

impl TrainLog {
    /// `epoch,train_loss,val_f1,lr`. Wall-clock times are left out so equal
    /// runs give equal bytes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_f1,lr")?;
        for e in &self.epochs {
            writeln!(w, "{},{:.6},{:.4},{:e}", e.epoch, e.train_loss, e.val_f1, e.lr)?;
        }
        Ok(())
    }

    /// Same log with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainLog {
        let mut log = self.clone();
        for e in &mut log.epochs {
            e.seconds = 0.0;
        }
        log
    }
}

/// Patience counter: stop once `patience` consecutive epochs fail to beat the
/// best value strictly.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records `value` for 1-based `epoch`; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, best)) if value <= best => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Per-step dropout seed: a counter-based mix of the run seed and global step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains from `state` and returns the best-validation state with its log.
pub fn train(
    state: ModelState,
    train_set: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let val_codes: Vec<String> = (0..state.config.classes).map(|c| c.to_string()).collect();
    let frozen = state.config.backbone_frozen;
    // A frozen backbone never changes, so its features are computed once.
    let cached = if frozen {
        Some((
            features_of(&state, train_set)?,
            features_of(&state, validation)?,
        ))
    } else {
        None
    };

    let mut state = state;
    let mut optimizer = AdamW::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_state = state.clone();
    let mut epochs = Vec::new();
    let mut step: u64 = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = lr_at(config, step);
        for rows in order.chunks(config.batch_size) {
            let (batch, targets) = train_set.batch(rows);
            let seed = step_seed(config.seed, step);
            let (loss, grads) = match &cached {
                Some((features, _)) => {
                    let f = features.select(ndarray::Axis(0), rows);
                    state.head_backward(f.view(), targets.view(), true, seed)?
                }
                None => state.backward(&batch, targets.view(), true, seed)?,
            };
            lr = lr_at(config, step);
            optimizer.step(&mut state, &grads, lr, config);
            loss_sum += loss * rows.len() as f64;
            step += 1;
        }

        let val_logits = match &cached {
            Some((_, features)) => state.head_logits(features.view(), false, 0)?,
            None => dataset_logits(&state, validation)?,
        };
        let report = evaluate_indices(&validation.labels, &logits_to_sets(&val_logits, config.threshold), &val_codes)?;
        if stopper.observe(epoch, report.f1) {
            best_state = state.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_f1: report.f1,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            train_loss = record.train_loss,
            val_f1 = record.val_f1,
            lr = record.lr,
            "epoch done"
        );
        epochs.push(record);
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let (best_epoch, best_val_f1) = stopper.best().expect("at least one epoch");
    Ok((
        best_state,
        TrainLog {
            epochs,
            best_epoch,
            best_val_f1,
            stop_reason,
            steps: step,
        },
    ))
}

fn features_of(state: &ModelState, data: &Dataset) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), state.config.dim));
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(INFERENCE_BATCH) {
        let (batch, _) = data.batch(chunk);
        let f = state.features(&batch)?;
        for (i, &r) in chunk.iter().enumerate() {
            out.row_mut(r).assign(&f.row(i));
        }
    }
    Ok(out)
}

/// Runs `run` once per seed and collects the reports in seed order.
pub fn run_replicates<F>(seeds: &[u64], mut run: F) -> Result<Vec<EvalReport>>
where
    F: FnMut(u64) -> Result<EvalReport>,
{
    seeds.iter().map(|&s| run(s)).collect()
}

/// True if every tensor of `partition` is bitwise equal in both states.
pub fn partition_unchanged(a: &ModelState, b: &ModelState, partition: Partition) -> bool {
    a.params
        .tensors()
        .into_iter()
        .zip(b.params.tensors())
        .filter(|(t, _)| t.partition == partition)
        .all(|(x, y)| x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, 0), 0.0);
        assert_eq!(lr_at(&c, 2500), 1.5e-5);
        assert_eq!(lr_at(&c, 5000), 3e-5);
        assert_eq!(lr_at(&c, 1_000_000), 3e-5);
        let none = TrainConfig { warmup_steps: 0, ..c };
        assert_eq!(lr_at(&none, 0), 3e-5);
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(5);
        let seq = [0.40, 0.42, 0.41, 0.41, 0.41, 0.41, 0.41, 0.50];
        let mut stopped_after = None;
        for (i, &v) in seq.iter().enumerate() {
            s.observe(i + 1, v);
            if s.should_stop() {
                stopped_after = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_after, Some(7));
        assert_eq!(s.best(), Some((2, 0.42)));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopping::new(1);
        assert!(s.observe(1, 0.5));
        assert!(!s.observe(2, 0.5));
        assert!(s.should_stop());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 60, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn step_seeds_differ() {
        let seeds: BTreeSet<u64> = (0..1000).map(|s| step_seed(7, s)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(step_seed(7, 0), step_seed(8, 0));
    }

    #[test]
    fn replicates_run_in_seed_order() {
        let mut seen = Vec::new();
        let reports = run_replicates(&[3, 1, 2], |s| {
            seen.push(s);
            let t = vec![BTreeSet::from([0usize])];
            evaluate_indices(&t, &t, &["0".to_string()])
        })
        .unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(seen, [3, 1, 2]);
    }
}
