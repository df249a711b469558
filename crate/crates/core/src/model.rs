//! The two joint architectures, assembled from the kernel.
//!
//! Both variants share an input stack: per token, the concatenation of a
//! frozen word vector (static table or precomputed contextual store), a
//! char-CNN feature (convolution + max-over-time pooling over character
//! embeddings), and six binary word flags. The recurrent variant runs a
//! bidirectional LSTM over the sequence; the time-distributed variant
//! applies one shared two-layer MLP independently at every timestep. Each
//! has a per-token slot head and a whole-utterance intent head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilstm, LstmParamIds, Scalar, Tape, Tensor, TensorId};
use crate::corpus::{Utterance, Vocabularies};
use crate::embeddings::{ContextualStore, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::decode_spans;
use crate::features::{char_encode, word_flags, FLAG_COUNT};

/// Width of the word-flag feature block.
pub const FLAGS_DIM: usize = FLAG_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bidirectional LSTM over the token sequence.
    Recurrent,
    /// One shared feed-forward network applied at every timestep.
    TimeDistributed,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Recurrent => write!(f, "recurrent"),
            Variant::TimeDistributed => write!(f, "time_distributed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Dimension of the word-vector slot, taken from the embedding source.
    pub word_dim: usize,
    pub char_emb_dim: usize,
    pub char_filters: usize,
    pub char_width: usize,
    pub max_char_len: usize,
    /// Hidden size; per direction for the recurrent variant.
    pub hidden: usize,
    pub dropout_rate: f64,
    pub slot_loss_weight: f64,
    pub intent_loss_weight: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, word_dim: usize) -> Self {
        ModelConfig {
            variant,
            word_dim,
            char_emb_dim: 25,
            char_filters: 30,
            char_width: 3,
            max_char_len: 20,
            hidden: 100,
            dropout_rate: 0.5,
            slot_loss_weight: 1.0,
            intent_loss_weight: 1.0,
            init_seed: 0,
        }
    }

    /// Per-token input width: word vector + char-CNN features + flags.
    pub fn input_dim(&self) -> usize {
        self.word_dim + self.char_filters + FLAGS_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_dim,
            self.char_emb_dim,
            self.char_filters,
            self.char_width,
            self.max_char_len,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Invalid("model dims must all be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.slot_loss_weight < 0.0 || self.intent_loss_weight < 0.0 {
            return Err(Error::Invalid("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Where per-token word vectors come from. Both sources are frozen.
pub enum WordSource<'a> {
    Static(&'a EmbeddingTable),
    Contextual(&'a ContextualStore),
}

impl WordSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            WordSource::Static(t) => t.dim(),
            WordSource::Contextual(s) => s.dim(),
        }
    }

    fn resolve<S: Scalar>(
        &self,
        utterance: u32,
        position: usize,
        token: &str,
        out: &mut [S],
    ) -> Result<()> {
        match self {
            WordSource::Static(table) => {
                let (vector, _oov) = table.lookup(token);
                for (o, &v) in out.iter_mut().zip(vector.iter()) {
                    *o = S::from_f64(v as f64);
                }
            }
            WordSource::Contextual(store) => {
                let position = u16::try_from(position).map_err(|_| {
                    Error::Invalid(format!("token position {position} exceeds u16 range"))
                })?;
                let vector = store.get(utterance, position)?;
                for (o, &v) in out.iter_mut().zip(vector.iter()) {
                    *o = S::from_f64(v as f64);
                }
            }
        }
        Ok(())
    }
}

/// Padded arrays for one mini-batch, word vectors already resolved.
#[derive(Debug, Clone)]
pub struct Batch<S: Scalar> {
    pub size: usize,
    pub time: usize,
    pub word_dim: usize,
    pub max_char_len: usize,
    pub utterance_ids: Vec<u32>,
    pub lengths: Vec<usize>,
    /// `[size, time, word_dim]`, zero at padding.
    pub word_vectors: Vec<S>,
    /// `[size, time, max_char_len]`, pad index at padding.
    pub char_ids: Vec<usize>,
    /// `[size, time, FLAGS_DIM]`.
    pub flags: Vec<S>,
    /// `[size, time]`, 1 at real tokens.
    pub mask: Vec<S>,
    /// `[size, time]`, the `O` index at padding and for unseen gold tags.
    pub slot_targets: Vec<usize>,
    /// `[size]`, 0 for unseen gold intents.
    pub intent_targets: Vec<usize>,
}

/// Encodes utterances into one padded batch. Unseen gold labels map to `O`
/// (slots) or class 0 (intents); they only matter for loss values, never
/// for metrics, which compare label strings.
pub fn encode_batch<S: Scalar>(
    utterances: &[&Utterance],
    vocabs: &Vocabularies,
    source: &WordSource,
    config: &ModelConfig,
) -> Result<Batch<S>> {
    if utterances.is_empty() {
        return Err(Error::Invalid("cannot encode an empty batch".into()));
    }
    if source.dim() != config.word_dim {
        return Err(Error::Invalid(format!(
            "embedding source dim {} does not match model word_dim {}",
            source.dim(),
            config.word_dim
        )));
    }
    let size = utterances.len();
    let time = utterances.iter().map(|u| u.len()).max().unwrap();
    let (word_dim, mcl) = (config.word_dim, config.max_char_len);
    let o_id = vocabs.slots.id("O").expect("slot map always contains O");

    let mut batch = Batch {
        size,
        time,
        word_dim,
        max_char_len: mcl,
        utterance_ids: Vec::with_capacity(size),
        lengths: Vec::with_capacity(size),
        word_vectors: vec![S::zero(); size * time * word_dim],
        char_ids: vec![0; size * time * mcl],
        flags: vec![S::zero(); size * time * FLAGS_DIM],
        mask: vec![S::zero(); size * time],
        slot_targets: vec![o_id; size * time],
        intent_targets: Vec::with_capacity(size),
    };

    for (b, utt) in utterances.iter().enumerate() {
        if utt.is_empty() {
            return Err(Error::Invalid(format!("utterance {} is empty", utt.id)));
        }
        batch.utterance_ids.push(utt.id);
        batch.lengths.push(utt.len());
        batch
            .intent_targets
            .push(vocabs.intents.id(&utt.intent).unwrap_or(0));
        for (t, token) in utt.tokens.iter().enumerate() {
            let row = b * time + t;
            source.resolve(
                utt.id,
                t,
                token,
                &mut batch.word_vectors[row * word_dim..(row + 1) * word_dim],
            )?;
            let enc = char_encode(token, vocabs, mcl);
            batch.char_ids[row * mcl..(row + 1) * mcl].copy_from_slice(&enc.ids);
            for (i, v) in word_flags(token).as_f64().iter().enumerate() {
                batch.flags[row * FLAGS_DIM + i] = S::from_f64(*v);
            }
            batch.mask[row] = S::one();
            batch.slot_targets[row] = vocabs.slots.id(&utt.tags[t]).unwrap_or(o_id);
        }
    }
    Ok(batch)
}

/// One utterance-level prediction: intent plus decoded entity spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub label: String,
    /// Inclusive token span.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prediction {
    pub intent: String,
    pub entities: Vec<Entity>,
}

/// Result of one recorded forward pass; the tape stays alive so the caller
/// can attach a loss and run backward.
pub struct ForwardPass<S: Scalar> {
    pub tape: Tape<S>,
    /// `[batch, time, n_slots]`.
    pub slot_logits: TensorId,
    /// `[batch, n_intents]`.
    pub intent_logits: TensorId,
    /// Tape ids of the model parameters, in [`Model::param_names`] order.
    pub param_ids: Vec<TensorId>,
}

/// A configured architecture with its named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    vocabs: Vocabularies,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

/// The full parameter inventory (name, shape) for a config+vocabulary pair,
/// in build order.
pub fn param_specs(config: &ModelConfig, vocabs: &Vocabularies) -> Vec<(String, Vec<usize>)> {
    let input = config.input_dim();
    let hidden = config.hidden;
    let n_slots = vocabs.slots.len();
    let n_intents = vocabs.intents.len();
    let mut specs = vec![
        (
            "char_emb".to_string(),
            vec![vocabs.chars.len(), config.char_emb_dim],
        ),
        (
            "char_conv_kernel".to_string(),
            vec![config.char_width, config.char_emb_dim, config.char_filters],
        ),
        ("char_conv_bias".to_string(), vec![config.char_filters]),
    ];
    match config.variant {
        Variant::Recurrent => {
            for dir in ["fwd", "bwd"] {
                specs.push((
                    format!("lstm_{dir}_weights"),
                    vec![input + hidden, 4 * hidden],
                ));
                specs.push((format!("lstm_{dir}_bias"), vec![4 * hidden]));
            }
            specs.push(("slot_weights".into(), vec![2 * hidden, n_slots]));
            specs.push(("slot_bias".into(), vec![n_slots]));
            specs.push(("intent_weights".into(), vec![2 * hidden, n_intents]));
            specs.push(("intent_bias".into(), vec![n_intents]));
        }
        Variant::TimeDistributed => {
            specs.push(("mlp1_weights".into(), vec![input, hidden]));
            specs.push(("mlp1_bias".into(), vec![hidden]));
            specs.push(("mlp2_weights".into(), vec![hidden, hidden]));
            specs.push(("mlp2_bias".into(), vec![hidden]));
            specs.push(("slot_weights".into(), vec![hidden, n_slots]));
            specs.push(("slot_bias".into(), vec![n_slots]));
            specs.push(("intent_weights".into(), vec![hidden, n_intents]));
            specs.push(("intent_bias".into(), vec![n_intents]));
        }
    }
    specs
}

fn glorot_uniform<S: Scalar>(shape: &[usize], rng: &mut ChaCha20Rng) -> Vec<S> {
    let (fan_in, fan_out) = match shape {
        [rows, cols] => (*rows, *cols),
        [width, cin, cout] => (width * cin, width * cout),
        _ => unreachable!("weights are rank 2 or 3"),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..shape.iter().product())
        .map(|_| S::from_f64(rng.random_range(-limit..limit)))
        .collect()
}

impl<S: Scalar> Model<S> {
    /// Builds a model with Glorot-uniform weights from `init_seed`. Biases
    /// start at zero except the LSTM forget-gate block, which starts at 1.
    pub fn build(config: ModelConfig, vocabs: Vocabularies) -> Result<Model<S>> {
        config.validate()?;
        if vocabs.slots.is_empty() || vocabs.intents.is_empty() {
            return Err(Error::Invalid("vocabularies are incomplete".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_specs(&config, &vocabs) {
            let data = if shape.len() == 1 {
                let mut data = vec![S::zero(); shape[0]];
                if name.starts_with("lstm_") && name.ends_with("_bias") {
                    let hidden = shape[0] / 4;
                    for v in &mut data[hidden..2 * hidden] {
                        *v = S::one();
                    }
                }
                data
            } else {
                glorot_uniform(&shape, &mut rng)
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?.with_grad());
        }
        Ok(Model {
            config,
            vocabs,
            names,
            tensors,
        })
    }

    /// Reassembles a model from explicit parameter tensors, validating them
    /// against the config's parameter inventory.
    pub fn from_parts(
        config: ModelConfig,
        vocabs: Vocabularies,
        names: Vec<String>,
        tensors: Vec<Tensor<S>>,
    ) -> Result<Model<S>> {
        config.validate()?;
        let specs = param_specs(&config, &vocabs);
        if names.len() != specs.len() || tensors.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                specs.len(),
                names.len()
            )));
        }
        for ((name, tensor), (want_name, want_shape)) in names.iter().zip(&tensors).zip(&specs) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    tensor.shape()
                )));
            }
        }
        let tensors = tensors.into_iter().map(|t| t.with_grad()).collect();
        Ok(Model {
            config,
            vocabs,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabs(&self) -> &Vocabularies {
        &self.vocabs
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    /// Mutable access for the optimizer; shapes must be preserved.
    pub fn param_tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(&self.tensors[idx])
    }

    pub fn set_loss_weights(&mut self, slot: f64, intent: f64) {
        self.config.slot_loss_weight = slot;
        self.config.intent_loss_weight = intent;
    }

    /// Total trainable parameter count. Frozen embedding inputs are not
    /// parameters and are excluded by construction.
    pub fn count_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Parameter count with the named head excluded, for single-task
    /// reporting.
    pub fn count_parameters_excluding(&self, head: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(name, _)| {
                *name != &format!("{head}_weights") && *name != &format!("{head}_bias")
            })
            .map(|(_, t)| t.len())
            .sum()
    }

    fn check_batch(&self, batch: &Batch<S>) -> Result<()> {
        if batch.word_dim != self.config.word_dim || batch.max_char_len != self.config.max_char_len
        {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch encoded for word_dim {} / max_char_len {}, model wants {} / {}",
                    batch.word_dim,
                    batch.max_char_len,
                    self.config.word_dim,
                    self.config.max_char_len
                ),
            ));
        }
        let (b, t) = (batch.size, batch.time);
        if batch.lengths.len() != b
            || batch.mask.len() != b * t
            || batch.word_vectors.len() != b * t * batch.word_dim
            || batch.char_ids.len() != b * t * batch.max_char_len
            || batch.flags.len() != b * t * FLAGS_DIM
            || batch.slot_targets.len() != b * t
            || batch.intent_targets.len() != b
        {
            return Err(Error::shape("forward", "inconsistent batch arrays"));
        }
        for (row, &len) in batch.lengths.iter().enumerate() {
            if len == 0 || len > t {
                return Err(Error::shape(
                    "forward",
                    format!("row {row} has length {len} outside 1..={t}"),
                ));
            }
            for pos in 0..t {
                let valid = pos < len;
                let m = batch.mask[row * t + pos];
                if (valid && m != S::one()) || (!valid && m != S::zero()) {
                    return Err(Error::shape(
                        "forward",
                        format!("mask disagrees with token length at row {row}, position {pos}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn pid(&self, ids: &[TensorId], name: &str) -> TensorId {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .expect("parameter name is part of the inventory");
        ids[idx]
    }

    /// Records one forward pass on a fresh tape. In train mode, dropout is
    /// applied to the per-token inputs and to both heads' inputs, driven by
    /// `rng`.
    pub fn forward(
        &self,
        batch: &Batch<S>,
        train_mode: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<ForwardPass<S>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let param_ids: Vec<TensorId> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let p = |name: &str| self.pid(&param_ids, name);
        let (b, t) = (batch.size, batch.time);
        let rate = self.config.dropout_rate;

        // char CNN: embed, convolve over characters, pool
        let char_emb = tape.gather(p("char_emb"), &batch.char_ids, &[b * t, batch.max_char_len])?;
        let char_emb = tape.reshape(
            char_emb,
            vec![b * t, batch.max_char_len, self.config.char_emb_dim],
        )?;
        let conv = tape.conv1d_over_time(char_emb, p("char_conv_kernel"), p("char_conv_bias"))?;
        let char_feat = tape.max_pool_over_time(conv)?;
        let char_feat = tape.reshape(char_feat, vec![b, t, self.config.char_filters])?;

        let words = tape.leaf(Tensor::new(
            vec![b, t, batch.word_dim],
            batch.word_vectors.clone(),
        )?);
        let flags = tape.leaf(Tensor::new(vec![b, t, FLAGS_DIM], batch.flags.clone())?);
        let x = tape.concat_last(words, char_feat)?;
        let x = tape.concat_last(x, flags)?;
        let x = tape.dropout(x, rate, train_mode, rng)?;

        let (slot_logits, intent_logits) = match self.config.variant {
            Variant::Recurrent => {
                let out = bilstm(
                    &mut tape,
                    x,
                    &batch.mask,
                    LstmParamIds {
                        weights: p("lstm_fwd_weights"),
                        bias: p("lstm_fwd_bias"),
                    },
                    LstmParamIds {
                        weights: p("lstm_bwd_weights"),
                        bias: p("lstm_bwd_bias"),
                    },
                )?;
                let hidden2 = 2 * self.config.hidden;
                let seq = tape.dropout(out.sequence, rate, train_mode, rng)?;
                let seq = tape.reshape(seq, vec![b * t, hidden2])?;
                let slot = tape.matmul(seq, p("slot_weights"))?;
                let slot = tape.add_bias(slot, p("slot_bias"))?;
                let slot = tape.reshape(slot, vec![b, t, self.vocabs.slots.len()])?;

                let finals = tape.concat_last(out.final_forward, out.final_backward)?;
                let finals = tape.dropout(finals, rate, train_mode, rng)?;
                let intent = tape.matmul(finals, p("intent_weights"))?;
                let intent = tape.add_bias(intent, p("intent_bias"))?;
                (slot, intent)
            }
            Variant::TimeDistributed => {
                let input = self.config.input_dim();
                let hidden = self.config.hidden;
                let flat = tape.reshape(x, vec![b * t, input])?;
                let h1 = tape.matmul(flat, p("mlp1_weights"))?;
                let h1 = tape.add_bias(h1, p("mlp1_bias"))?;
                let h1 = tape.relu(h1)?;
                let h2 = tape.matmul(h1, p("mlp2_weights"))?;
                let h2 = tape.add_bias(h2, p("mlp2_bias"))?;
                let h2 = tape.relu(h2)?;

                let slot_in = tape.dropout(h2, rate, train_mode, rng)?;
                let slot = tape.matmul(slot_in, p("slot_weights"))?;
                let slot = tape.add_bias(slot, p("slot_bias"))?;
                let slot = tape.reshape(slot, vec![b, t, self.vocabs.slots.len()])?;

                let h_seq = tape.reshape(h2, vec![b, t, hidden])?;
                let pooled = tape.masked_mean_over_time(h_seq, &batch.mask)?;
                let pooled = tape.dropout(pooled, rate, train_mode, rng)?;
                let intent = tape.matmul(pooled, p("intent_weights"))?;
                let intent = tape.add_bias(intent, p("intent_bias"))?;
                (slot, intent)
            }
        };
        Ok(ForwardPass {
            tape,
            slot_logits,
            intent_logits,
            param_ids,
        })
    }

    /// Greedy prediction for one pre-tokenized utterance.
    pub fn predict(
        &self,
        tokens: &[String],
        utterance_id: u32,
        source: &WordSource,
    ) -> Result<Prediction> {
        let (tags, intent) = self.predict_tags(tokens, utterance_id, source)?;
        let entities = decode_spans(&tags)
            .into_iter()
            .map(|span| Entity {
                text: tokens[span.start..=span.end].join(" "),
                label: span.label,
                start: span.start,
                end: span.end,
            })
            .collect();
        Ok(Prediction { intent, entities })
    }

    /// Per-token argmax slot tags and the argmax intent label. Ties break
    /// toward the lowest class index.
    pub fn predict_tags(
        &self,
        tokens: &[String],
        utterance_id: u32,
        source: &WordSource,
    ) -> Result<(Vec<String>, String)> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot predict an empty utterance".into()));
        }
        let utt = Utterance {
            id: utterance_id,
            tokens: tokens.to_vec(),
            tags: vec!["O".to_string(); tokens.len()],
            intent: String::new(),
        };
        let batch = encode_batch::<S>(&[&utt], &self.vocabs, source, &self.config)?;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let pass = self.forward(&batch, false, &mut rng)?;

        let slot_values = pass.tape.value(pass.slot_logits);
        let n_slots = self.vocabs.slots.len();
        let mut tags = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let row = &slot_values.data()[t * n_slots..(t + 1) * n_slots];
            let best = argmax(row);
            tags.push(
                self.vocabs
                    .slots
                    .get(best)
                    .expect("argmax index within vocabulary")
                    .to_string(),
            );
        }
        let intent_values = pass.tape.value(pass.intent_logits);
        let intent = self
            .vocabs
            .intents
            .get(argmax(intent_values.data()))
            .expect("argmax index within vocabulary")
            .to_string();
        Ok((tags, intent))
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Weighted joint objective:
/// `slot_weight * mean-over-valid-tokens(CE) + intent_weight * mean-over-batch(CE)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<S: Scalar>(
    tape: &mut Tape<S>,
    slot_logits: TensorId,
    intent_logits: TensorId,
    slot_targets: &[usize],
    intent_targets: &[usize],
    mask: &[S],
    slot_weight: f64,
    intent_weight: f64,
) -> Result<TensorId> {
    let slot_ce = tape.masked_cross_entropy(slot_logits, slot_targets, mask)?;
    let ones = vec![S::one(); intent_targets.len()];
    let intent_ce = tape.masked_cross_entropy(intent_logits, intent_targets, &ones)?;
    let weighted_slot = tape.scale(slot_ce, S::from_f64(slot_weight))?;
    let weighted_intent = tape.scale(intent_ce, S::from_f64(intent_weight))?;
    tape.add(weighted_slot, weighted_intent)
}
