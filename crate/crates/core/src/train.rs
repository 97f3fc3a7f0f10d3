//! The training loop: seeded batching, AdamW, per-epoch validation and
//! early stopping with the best weights retained.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::combined::{batch_loss, LanguageModel};
use crate::data::{collate, filter_by_length, split_train_val, ByteTokenizer, Example, TokenBatch};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, param_groups, EpochRecord, TrainConfig, TrainState};
use crate::tensor::Tensor;

/// Forward, backward and gradient routing for one batch. Returns the loss.
pub fn accumulate_batch<M: LanguageModel + ?Sized>(model: &mut M, batch: &TokenBatch) -> Result<f32> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, batch)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    for (_, store) in model.stores_mut() {
        grads.accumulate_into(&tape, store);
    }
    Ok(value)
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step<M: LanguageModel + ?Sized>(
    model: &mut M,
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &TokenBatch,
) -> Result<f32> {
    let groups = param_groups(model, config);
    if groups.is_empty() {
        return Err(Error::Contract("model has no trainable parameters".into()));
    }
    let loss = accumulate_batch(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::Contract(format!(
            "non-finite loss {loss} at step {}",
            state.step + 1
        )));
    }
    adamw_step(model, state, &groups, config)?;
    state.step_losses.push(loss);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token-weighted mean cross-entropy.
    pub loss: f32,
    pub perplexity: f32,
    pub tokens: usize,
}

/// Token-weighted loss over `examples` that fit the model's input limit.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    examples: &[Example],
    batch_size: usize,
) -> Result<EvalReport> {
    let fitting = filter_by_length(examples, model.max_input_len())?.kept;
    if fitting.is_empty() {
        return Err(Error::Contract("no evaluation example fits the model".into()));
    }
    let tok = ByteTokenizer;
    let mut sum = 0.0f64;
    let mut tokens = 0usize;
    for chunk in fitting.chunks(batch_size.max(1)) {
        let batch = collate(chunk, &tok)?;
        let n = scored_targets(model, &batch);
        if n == 0 {
            continue;
        }
        sum += f64::from(batch_loss(model, &batch)?) * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Contract("evaluation set has no scored tokens".into()));
    }
    let loss = (sum / tokens as f64) as f32;
    Ok(EvalReport {
        loss,
        perplexity: loss.exp(),
        tokens,
    })
}

/// Number of labelled targets inside the columns the model scores.
fn scored_targets<M: LanguageModel + ?Sized>(model: &M, batch: &TokenBatch) -> usize {
    let offset = batch.len - model.window(batch.len);
    crate::combined::window_labels(batch, offset)
        .iter()
        .filter(|&&l| l != crate::data::IGNORE)
        .count()
}

/// Exponentiated token-weighted validation loss.
pub fn eval_perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    examples: &[Example],
    batch_size: usize,
) -> Result<f32> {
    Ok(evaluate(model, examples, batch_size)?.perplexity)
}

/// Parameter values of every store, in `stores()` order.
pub type Snapshot = Vec<Vec<Tensor>>;

pub fn snapshot<M: LanguageModel + ?Sized>(model: &M) -> Snapshot {
    model
        .stores()
        .iter()
        .map(|(_, s)| s.iter().map(|(_, p)| p.tensor.clone()).collect())
        .collect()
}

/// Writes snapshot values back; freeze flags are left as they are.
pub fn restore<M: LanguageModel + ?Sized>(model: &mut M, snap: &Snapshot) {
    for ((_, store), saved) in model.stores_mut().into_iter().zip(snap) {
        for ((_, p), t) in store.iter_mut().zip(saved) {
            p.tensor.data_mut().copy_from_slice(t.data());
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub state: TrainState,
    /// Loss of the very first batch before any update.
    pub initial_loss: f32,
    pub stopped_early: bool,
    pub train_examples: usize,
    pub val_examples: usize,
    /// Weights at the best validation loss; already restored into the model.
    pub best: Snapshot,
}

impl TrainReport {
    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

/// Filters `corpus` to the model's limits, splits it and trains.
pub fn train<M: LanguageModel + ?Sized>(
    model: &mut M,
    corpus: &[Example],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let limit = config.max_tokens.min(model.max_input_len());
    let kept = filter_by_length(corpus, limit)?.kept;
    if kept.len() < 2 {
        return Err(Error::Contract(format!(
            "only {} examples fit in {limit} tokens; need at least 2",
            kept.len()
        )));
    }
    let (train_set, val_set) = split_train_val(&kept, config.val_fraction, config.seed)?;
    train_split(model, &train_set, &val_set, config)
}

/// Trains on an explicit split. Batches are reshuffled each epoch from
/// `config.seed`; after every epoch the validation loss drives early stopping.
pub fn train_split<M: LanguageModel + ?Sized>(
    model: &mut M,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let limit = model.max_input_len();
    if let Some(ex) = train_set.iter().find(|ex| ex.token_len() > limit) {
        return Err(Error::Capacity(format!(
            "training example of {} tokens exceeds model limit {limit}",
            ex.token_len()
        )));
    }
    let tok = ByteTokenizer;
    let mut state = TrainState::new(model);
    let mut initial_loss = None;
    let mut best = snapshot(model);
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| state.step as usize >= m) {
                break;
            }
            let chunk: Vec<Example> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let batch = collate(&chunk, &tok)?;
            let loss = train_step(model, &mut state, config, &batch)?;
            initial_loss.get_or_insert(loss);
            sum += f64::from(loss);
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let train_loss = (sum / batches as f64) as f32;
        let val_loss = evaluate(model, val_set, config.batch_size)?.loss;
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            steps: state.step,
        });
        log::info!(
            "epoch {} train {train_loss:.4} val {val_loss:.4} steps {}",
            epoch + 1,
            state.step
        );
        let improved = val_loss < state.best_val_loss - config.min_delta;
        let exhausted = state.observe_val(val_loss, config.min_delta, config.patience);
        if improved {
            best = snapshot(model);
        }
        if exhausted {
            log::info!("early stop after epoch {}", epoch + 1);
            stopped_early = true;
            break 'epochs;
        }
        if config.max_steps.is_some_and(|m| state.step as usize >= m) {
            break;
        }
    }
    if !state.history.is_empty() {
        restore(model, &best);
    }
    Ok(TrainReport {
        state,
        initial_loss: initial_loss.unwrap_or(f32::NAN),
        stopped_early,
        train_examples: train_set.len(),
        val_examples: val_set.len(),
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, TaskMix};
    use crate::transformer::{StackConfig, TransformerStack};

    fn tiny() -> TransformerStack {
        TransformerStack::new(
            StackConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                vocab_size: crate::data::VOCAB_SIZE,
                max_len: 64,
            },
            3,
        )
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_receiver: 3e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        let mut m = tiny();
        assert!(matches!(train(&mut m, &[], &quick()), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_decreases_and_runs_are_repeatable() {
        let data = gen_synthetic(40, 1, TaskMix::SUM_ONLY).unwrap();
        let mut a = tiny();
        let ra = train(&mut a, &data, &quick()).unwrap();
        assert_eq!(ra.history().len(), 2);
        assert!(ra.history()[1].train_loss < ra.initial_loss);
        let mut b = tiny();
        let rb = train(&mut b, &data, &quick()).unwrap();
        let bits = |r: &TrainReport| -> Vec<u32> {
            r.state.step_losses.iter().map(|l| l.to_bits()).collect()
        };
        assert_eq!(bits(&ra), bits(&rb));
    }

    #[test]
    fn max_steps_caps_training() {
        let data = gen_synthetic(40, 1, TaskMix::SUM_ONLY).unwrap();
        let mut m = tiny();
        let cfg = TrainConfig {
            max_steps: Some(3),
            epochs: 5,
            ..quick()
        };
        let r = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(r.state.step, 3);
    }

    #[test]
    fn evaluation_is_token_weighted() {
        let m = tiny();
        let data = gen_synthetic(6, 2, TaskMix::default()).unwrap();
        let whole = evaluate(&m, &data, 6).unwrap();
        let split = evaluate(&m, &data, 4).unwrap();
        assert_eq!(whole.tokens, split.tokens);
        assert!((whole.loss - split.loss).abs() < 1e-5);
        assert!((whole.perplexity - whole.loss.exp()).abs() < 1e-3);
    }

    #[test]
    fn restore_round_trips() {
        let mut m = tiny();
        let snap = snapshot(&m);
        let before = m.store().checksum();
        let id = m.store().find("lm_head").unwrap();
        m.store_mut().get_mut(id).tensor.data_mut()[0] += 1.0;
        assert_ne!(m.store().checksum(), before);
        restore(&mut m, &snap);
        assert_eq!(m.store().checksum(), before);
    }
}
