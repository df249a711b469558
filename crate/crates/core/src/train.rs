//! Mini-batch training with dropout, early stopping on validation loss,
//! best-epoch parameter restoration, and per-epoch timing.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamConfig, AdamState, Scalar, Tensor};
use crate::corpus::{Corpus, Vocabularies};
use crate::error::{Error, Result};
use crate::model::{encode_batch, joint_loss, Batch, Model, ModelConfig, WordSource};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs the validation loss may fail to improve on its best value
    /// before training stops.
    pub patience: usize,
    pub shuffle_seed: u64,
    pub optimizer: AdamConfig,
    /// Global-norm gradient cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 50,
            patience: 2,
            shuffle_seed: 0,
            optimizer: AdamConfig::default(),
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Joint,
    IntentOnly,
    NerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON object per line:
    /// `{"epoch":int,"train_loss":real,"val_loss":real,"seconds":real}`.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut writer, record)?;
            writeln!(writer)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(records)
    }
}

/// Arithmetic mean of recorded wall-clock epoch durations.
pub fn epoch_timer(history: &TrainHistory) -> Result<f64> {
    if history.records.is_empty() {
        return Err(Error::Invalid("no epochs recorded".into()));
    }
    Ok(history.records.iter().map(|r| r.seconds).sum::<f64>() / history.records.len() as f64)
}

/// Early stopping on best-so-far validation loss with strict improvement;
/// ties count as non-improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best > self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// SplitMix64-style stream derivation so per-epoch seeds never collide
/// across purposes.
fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const VAL_BATCH_SEED: u64 = 0;

/// Shuffles the corpus by `seed`, groups into `batch_size` chunks, and pads
/// each batch to its own longest utterance.
pub fn make_batches<S: Scalar>(
    corpus: &Corpus,
    vocabs: &Vocabularies,
    source: &WordSource,
    model_config: &ModelConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch<S>>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(corpus.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let utterances: Vec<&crate::corpus::Utterance> =
            chunk.iter().map(|&i| &corpus.utterances[i]).collect();
        batches.push(encode_batch(&utterances, vocabs, source, model_config)?);
    }
    Ok(batches)
}

fn task_weights<S: Scalar>(model: &Model<S>, task: Task) -> (f64, f64) {
    let config = model.config();
    match task {
        Task::Joint => (config.slot_loss_weight, config.intent_loss_weight),
        Task::IntentOnly => (0.0, config.intent_loss_weight),
        Task::NerOnly => (config.slot_loss_weight, 0.0),
    }
}

struct BatchLoss<S: Scalar> {
    pass: crate::model::ForwardPass<S>,
    loss: crate::autodiff::TensorId,
    value: f64,
}

fn batch_loss<S: Scalar>(
    model: &Model<S>,
    batch: &Batch<S>,
    train_mode: bool,
    rng: &mut ChaCha20Rng,
    weights: (f64, f64),
) -> Result<BatchLoss<S>> {
    let mut pass = model.forward(batch, train_mode, rng)?;
    let loss = joint_loss(
        &mut pass.tape,
        pass.slot_logits,
        pass.intent_logits,
        &batch.slot_targets,
        &batch.intent_targets,
        &batch.mask,
        weights.0,
        weights.1,
    )?;
    let value = pass.tape.value(loss).data()[0].to_f64();
    Ok(BatchLoss { pass, loss, value })
}

/// One optimization pass over prepared batches; returns the mean train loss
/// weighted by utterance count.
fn run_train_epoch<S: Scalar>(
    model: &mut Model<S>,
    batches: &[Batch<S>],
    optimizer: &mut AdamState<S>,
    dropout_rng: &mut ChaCha20Rng,
    weights: (f64, f64),
    clip_norm: Option<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let step = batch_loss(model, batch, true, dropout_rng, weights)?;
        let mut grads = step.pass.tape.backward(step.loss)?;
        let mut grad_vecs: Vec<Vec<S>> = step
            .pass
            .param_ids
            .iter()
            .zip(model.param_tensors())
            .map(|(&id, tensor)| grads.take(id, tensor.len()))
            .collect();
        if let Some(cap) = clip_norm {
            clip_global_norm(&mut grad_vecs, cap);
        }
        optimizer.step(model.param_tensors_mut(), &grad_vecs)?;
        total += step.value * batch.size as f64;
        count += batch.size;
    }
    Ok(total / count as f64)
}

/// Mean joint loss over a corpus in eval mode (dropout off), weighted by
/// utterance count, with deterministic batch grouping.
pub fn evaluate_loss<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    source: &WordSource,
    batch_size: usize,
    weights: (f64, f64),
) -> Result<f64> {
    let batches: Vec<Batch<S>> = make_batches(
        corpus,
        model.vocabs(),
        source,
        model.config(),
        batch_size,
        VAL_BATCH_SEED,
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in &batches {
        let step = batch_loss(model, batch, false, &mut rng, weights)?;
        total += step.value * batch.size as f64;
        count += batch.size;
    }
    Ok(total / count as f64)
}

/// Trains the joint objective with early stopping on validation loss and
/// returns the history; `model` is left holding the best epoch's
/// parameters.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    train: &Corpus,
    val: &Corpus,
    source: &WordSource,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    fit_single_task(model, train, val, source, config, Task::Joint)
}

/// Like [`fit`] with the other head's loss weight forced to zero, so its
/// parameters receive identically zero gradient.
pub fn fit_single_task<S: Scalar>(
    model: &mut Model<S>,
    train: &Corpus,
    val: &Corpus,
    source: &WordSource,
    config: &TrainConfig,
    task: Task,
) -> Result<TrainHistory> {
    if val.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    if config.max_epochs == 0 {
        return Err(Error::Invalid("max_epochs must be >= 1".into()));
    }
    let weights = task_weights(model, task);
    let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
    let mut optimizer = AdamState::new(&sizes, config.optimizer);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params: Vec<Tensor<S>> = model.param_tensors().to_vec();
    let mut records = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let batches: Vec<Batch<S>> = make_batches(
            train,
            model.vocabs(),
            source,
            model.config(),
            config.batch_size,
            mix_seed(config.shuffle_seed, mix_seed(epoch as u64, SHUFFLE_STREAM)),
        )?;
        let mut dropout_rng = ChaCha20Rng::seed_from_u64(mix_seed(
            config.shuffle_seed,
            mix_seed(epoch as u64, DROPOUT_STREAM),
        ));
        let train_loss = run_train_epoch(
            model,
            &batches,
            &mut optimizer,
            &mut dropout_rng,
            weights,
            config.clip_norm,
        )?;
        let val_loss = evaluate_loss(model, val, source, config.batch_size, weights)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_params = model.param_tensors().to_vec();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    model
        .param_tensors_mut()
        .iter_mut()
        .zip(best_params)
        .for_each(|(slot, best)| *slot = best);
    Ok(TrainHistory {
        records,
        stopped_early,
        best_epoch: stopper.best_epoch(),
    })
}

/// Runs `epochs` plain training epochs (no validation, no early stopping)
/// and returns each epoch's wall-clock seconds.
pub fn bench_epochs<S: Scalar>(
    model: &mut Model<S>,
    corpus: &Corpus,
    source: &WordSource,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Err(Error::Invalid("bench needs at least one epoch".into()));
    }
    let weights = task_weights(model, Task::Joint);
    let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
    let mut optimizer = AdamState::new(&sizes, config.optimizer);
    let mut durations = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        let batches: Vec<Batch<S>> = make_batches(
            corpus,
            model.vocabs(),
            source,
            model.config(),
            config.batch_size,
            mix_seed(config.shuffle_seed, mix_seed(epoch as u64, SHUFFLE_STREAM)),
        )?;
        let mut dropout_rng = ChaCha20Rng::seed_from_u64(mix_seed(
            config.shuffle_seed,
            mix_seed(epoch as u64, DROPOUT_STREAM),
        ));
        run_train_epoch(
            model,
            &batches,
            &mut optimizer,
            &mut dropout_rng,
            weights,
            config.clip_norm,
        )?;
        durations.push(start.elapsed().as_secs_f64());
    }
    Ok(durations)
}
