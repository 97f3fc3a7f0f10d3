//! The combined model: a frozen donor, a receiver with frozen embeddings and
//! a replaced head, and the bridges between them.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::bridge::{memory_mask, BridgeConfig, Bridges};
use crate::data::{ByteTokenizer, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;
use crate::transformer::{FreezeSelector, SeqBatch, StackConfig, TransformerStack};

/// Which optimizer group a store's trainable parameters belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Bridge,
    Receiver,
}

impl GroupKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Bridge => "bridge",
            GroupKind::Receiver => "receiver",
        }
    }
}

/// Logits for the trailing `batch.len - offset` columns of every row.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub offset: usize,
    /// Cross-attention nodes, one per bridge, when the model has bridges.
    pub bridge_attention: Vec<Var>,
}

/// A causal language model that can be trained and sampled.
pub trait LanguageModel {
    fn forward(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<ModelOutput>;

    /// Longest input `forward` accepts.
    fn max_input_len(&self) -> usize;

    /// Columns scored by `forward` for an input of `len` tokens.
    fn window(&self, len: usize) -> usize;

    fn vocab_out(&self) -> usize;

    /// Whether inputs beyond `max_input_len` are an error rather than
    /// something to slide a window over.
    fn hard_input_limit(&self) -> bool {
        false
    }

    /// Every store, in a fixed order, with its optimizer group.
    fn stores(&self) -> Vec<(GroupKind, &ParamStore)>;

    fn stores_mut(&mut self) -> Vec<(GroupKind, &mut ParamStore)>;

    /// Mean next-token cross-entropy over the batch's labelled positions.
    fn loss(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        let out = self.forward(tape, &batch.seq_batch())?;
        let labels = window_labels(batch, out.offset);
        tape.cross_entropy(out.logits, &labels)
    }

    fn trainable_count(&self) -> usize {
        self.stores().iter().map(|(_, s)| s.trainable_count()).sum()
    }

    fn zero_grads(&mut self) {
        for (_, s) in self.stores_mut() {
            s.zero_grads();
        }
    }
}

/// Labels of columns `offset..len` of every row.
pub fn window_labels(batch: &TokenBatch, offset: usize) -> Vec<i64> {
    if offset == 0 {
        return batch.labels.clone();
    }
    batch
        .labels
        .chunks(batch.len)
        .flat_map(|row| row[offset..].iter().copied())
        .collect()
}

impl LanguageModel for TransformerStack {
    fn forward(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<ModelOutput> {
        Ok(ModelOutput {
            logits: self.forward_logits(tape, batch)?,
            offset: 0,
            bridge_attention: Vec::new(),
        })
    }

    fn max_input_len(&self) -> usize {
        self.max_len()
    }

    fn window(&self, len: usize) -> usize {
        len
    }

    fn vocab_out(&self) -> usize {
        TransformerStack::vocab_out(self)
    }

    fn stores(&self) -> Vec<(GroupKind, &ParamStore)> {
        vec![(GroupKind::Receiver, self.store())]
    }

    fn stores_mut(&mut self) -> Vec<(GroupKind, &mut ParamStore)> {
        vec![(GroupKind::Receiver, self.store_mut())]
    }
}

/// Which donor positions a receiver query may attend to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemoryVisibility {
    /// A receiver query at absolute position `p` sees donor positions `<= p`.
    /// Teacher-forced training cannot read the token it is predicting.
    #[default]
    Causal,
    /// Every non-padding donor position is visible to every query.
    Full,
}

#[derive(Clone, Debug)]
pub struct CombinedModel {
    pub donor: TransformerStack,
    pub receiver: TransformerStack,
    pub bridges: Bridges,
    tokenizer: ByteTokenizer,
    visibility: MemoryVisibility,
}

impl CombinedModel {
    /// Fresh donor and receiver from their configurations.
    pub fn new(
        donor: StackConfig,
        receiver: StackConfig,
        bridge: BridgeConfig,
        seed: u64,
    ) -> Result<Self> {
        let donor = TransformerStack::new(donor, seed)?;
        let receiver = TransformerStack::new(receiver, seed.wrapping_add(1))?;
        Self::from_parts(donor, receiver, bridge, seed.wrapping_add(2))
    }

    /// Freezes the whole donor, replaces the receiver head to match the
    /// shared tokenizer, freezes the receiver embeddings and adds bridges.
    pub fn from_parts(
        mut donor: TransformerStack,
        mut receiver: TransformerStack,
        bridge: BridgeConfig,
        seed: u64,
    ) -> Result<Self> {
        let tokenizer = ByteTokenizer;
        for (name, stack) in [("donor", &donor), ("receiver", &receiver)] {
            if stack.config().vocab_size != tokenizer.vocab_size() {
                return Err(Error::Config(format!(
                    "{name} vocab_size {} differs from the shared tokenizer's {}",
                    stack.config().vocab_size,
                    tokenizer.vocab_size()
                )));
            }
        }
        donor.freeze(FreezeSelector::All);
        receiver.replace_head(tokenizer.vocab_size(), seed)?;
        receiver.freeze(FreezeSelector::EmbeddingsOnly);
        let bridges = Bridges::new(
            bridge,
            donor.d_model(),
            receiver.d_model(),
            receiver.config().n_layers,
            seed.wrapping_add(1),
        )?;
        Ok(CombinedModel {
            donor,
            receiver,
            bridges,
            tokenizer,
            visibility: MemoryVisibility::default(),
        })
    }

    pub fn tokenizer(&self) -> &ByteTokenizer {
        &self.tokenizer
    }

    pub fn visibility(&self) -> MemoryVisibility {
        self.visibility
    }

    pub fn set_visibility(&mut self, visibility: MemoryVisibility) {
        self.visibility = visibility;
    }

    /// Donor reads the full input; the receiver reads its last
    /// `min(n, receiver.max_len)` tokens and consults donor memory through
    /// each bridge.
    pub fn combined_forward(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<ModelOutput> {
        let n = batch.len;
        let (donor_max, recv_max) = (self.donor.max_len(), self.receiver.max_len());
        if n > donor_max {
            return Err(Error::Capacity(format!(
                "input of {n} tokens exceeds donor max_len {donor_max} (receiver max_len {recv_max})"
            )));
        }
        let memory = self.donor.forward_hidden_batch(tape, batch)?;
        let window = n.min(recv_max);
        let offset = n - window;
        let recv_batch = batch.suffix(window);
        let aligned = match self.visibility {
            MemoryVisibility::Causal => Some(offset),
            MemoryVisibility::Full => None,
        };
        let mask = memory_mask(batch.batch, window, &batch.pad, aligned)?;
        let mut attention = Vec::with_capacity(self.bridges.layers().len());
        let hidden = self
            .receiver
            .forward_hidden_with(tape, &recv_batch, |tape, layer, h| {
                match self.bridges.for_receiver_layer(layer) {
                    Some(i) => {
                        let out = self.bridges.bridge_forward(tape, i, h, memory, &mask)?;
                        attention.push(out.attention);
                        Ok(out.output)
                    }
                    None => Ok(h),
                }
            })?;
        let logits = self.receiver.lm_logits(tape, hidden)?;
        Ok(ModelOutput {
            logits,
            offset,
            bridge_attention: attention,
        })
    }

    /// The receiver alone on the same window the combined forward would use.
    pub fn receiver_only_forward(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<ModelOutput> {
        let window = batch.len.min(self.receiver.max_len());
        let out = self.receiver.forward(tape, &batch.suffix(window))?;
        Ok(ModelOutput {
            offset: batch.len - window,
            ..out
        })
    }
}

impl LanguageModel for CombinedModel {
    fn forward(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<ModelOutput> {
        self.combined_forward(tape, batch)
    }

    fn max_input_len(&self) -> usize {
        self.donor.max_len()
    }

    fn window(&self, len: usize) -> usize {
        len.min(self.receiver.max_len())
    }

    fn vocab_out(&self) -> usize {
        self.receiver.vocab_out()
    }

    fn hard_input_limit(&self) -> bool {
        true
    }

    fn stores(&self) -> Vec<(GroupKind, &ParamStore)> {
        vec![
            (GroupKind::Bridge, self.bridges.store()),
            (GroupKind::Receiver, self.receiver.store()),
            (GroupKind::Receiver, self.donor.store()),
        ]
    }

    fn stores_mut(&mut self) -> Vec<(GroupKind, &mut ParamStore)> {
        vec![
            (GroupKind::Bridge, self.bridges.store_mut()),
            (GroupKind::Receiver, self.receiver.store_mut()),
            (GroupKind::Receiver, self.donor.store_mut()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// `0` selects greedy decoding.
    pub temperature: f32,
    pub seed: u64,
    pub eos_id: usize,
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize, eos_id: usize) -> Self {
        GenerationParams {
            max_new_tokens,
            temperature: 0.0,
            seed: 0,
            eos_id,
        }
    }
}

/// Appends tokens until `eos_id` or `max_new_tokens`, re-running the full
/// forward pass each step. Returns only the new tokens.
///
/// Models with a hard input limit stop early once the context is full;
/// plain stacks slide their window over the most recent tokens instead.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    params: &GenerationParams,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    if params.max_new_tokens == 0 {
        return Err(Error::Contract("max_new_tokens must be at least 1".into()));
    }
    if !(params.temperature >= 0.0) {
        return Err(Error::Contract("temperature must be >= 0".into()));
    }
    let limit = model.max_input_len();
    let hard = model.hard_input_limit();
    if hard && prompt.len() > limit {
        return Err(Error::Capacity(format!(
            "prompt of {} tokens exceeds model input limit {limit}",
            prompt.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < params.max_new_tokens {
        if hard && context.len() > limit {
            break;
        }
        let start = context.len().saturating_sub(limit);
        let mut tape = Tape::new();
        let o = model.forward(&mut tape, &SeqBatch::single(&context[start..]))?;
        let vocab = model.vocab_out();
        let logits = tape.value(o.logits);
        let last = &logits[logits.len() - vocab..];
        let next = if params.temperature == 0.0 {
            argmax(last)
        } else {
            sample(last, params.temperature, &mut rng)
        };
        out.push(next);
        context.push(next);
        if next == params.eos_id {
            break;
        }
    }
    Ok(out)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| (f64::from(l - max) / f64::from(temperature)).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => argmax(logits),
    }
}

/// Teacher-forced mean loss of `model` on `batch` without recording gradients
/// anywhere (the tape is discarded).
pub fn batch_loss<M: LanguageModel + ?Sized>(model: &M, batch: &TokenBatch) -> Result<f32> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, batch)?;
    Ok(tape.value(loss)[0])
}
