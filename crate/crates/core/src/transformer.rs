//! Pre-norm causal transformer used for both the donor and the receiver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad(format!("d_model, n_heads and d_ff must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad(format!("vocab_size and max_len must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Which parameters [`TransformerStack::freeze`] turns off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeSelector {
    All,
    /// Token and position embeddings.
    EmbeddingsOnly,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

/// A batch of equal-length token rows, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
}

impl SeqBatch {
    pub fn single(ids: &[usize]) -> Self {
        SeqBatch {
            batch: 1,
            len: ids.len(),
            ids: ids.to_vec(),
            pad: vec![false; ids.len()],
        }
    }

    pub fn new(batch: usize, len: usize, ids: Vec<usize>, pad: Vec<bool>) -> Result<Self> {
        if ids.len() != batch * len || pad.len() != ids.len() || batch == 0 || len == 0 {
            return Err(Error::Dimension {
                op: "seq_batch",
                lhs: vec![batch, len],
                rhs: vec![ids.len(), pad.len()],
            });
        }
        Ok(SeqBatch {
            batch,
            len,
            ids,
            pad,
        })
    }

    /// The trailing `keep` columns of every row.
    pub fn suffix(&self, keep: usize) -> SeqBatch {
        let keep = keep.min(self.len);
        let start = self.len - keep;
        let mut ids = Vec::with_capacity(self.batch * keep);
        let mut pad = Vec::with_capacity(self.batch * keep);
        for b in 0..self.batch {
            ids.extend_from_slice(&self.ids[b * self.len + start..(b + 1) * self.len]);
            pad.extend_from_slice(&self.pad[b * self.len + start..(b + 1) * self.len]);
        }
        SeqBatch {
            batch: self.batch,
            len: keep,
            ids,
            pad,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    config: StackConfig,
    store: ParamStore,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub lm_head: ParamId,
    vocab_out: usize,
}

impl TransformerStack {
    /// Builds a stack with normal(0, 0.02) projections, unit gains and zero biases.
    pub fn new(config: StackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);

        let token_embedding = store.add("tok_emb", ParamKind::Embedding, randn(&[v, d]));
        let position_embedding = store.add(
            "pos_emb",
            ParamKind::Embedding,
            randn(&[config.max_len, d]),
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            blocks.push(BlockParams {
                ln1_gain: store.add(p("ln1.gain"), ParamKind::Gain, Tensor::full(&[d], 1.0)),
                ln1_bias: store.add(p("ln1.bias"), ParamKind::Bias, Tensor::zeros(&[d])),
                wq: store.add(p("attn.wq"), ParamKind::Matrix, randn(&[d, d])),
                wk: store.add(p("attn.wk"), ParamKind::Matrix, randn(&[d, d])),
                wv: store.add(p("attn.wv"), ParamKind::Matrix, randn(&[d, d])),
                wo: store.add(p("attn.wo"), ParamKind::Matrix, randn(&[d, d])),
                ln2_gain: store.add(p("ln2.gain"), ParamKind::Gain, Tensor::full(&[d], 1.0)),
                ln2_bias: store.add(p("ln2.bias"), ParamKind::Bias, Tensor::zeros(&[d])),
                w1: store.add(p("mlp.w1"), ParamKind::Matrix, randn(&[d, f])),
                w2: store.add(p("mlp.w2"), ParamKind::Matrix, randn(&[f, d])),
            });
        }
        let final_gain = store.add("ln_f.gain", ParamKind::Gain, Tensor::full(&[d], 1.0));
        let final_bias = store.add("ln_f.bias", ParamKind::Bias, Tensor::zeros(&[d]));
        let lm_head = store.add("lm_head", ParamKind::Matrix, randn(&[d, v]));
        Ok(TransformerStack {
            config,
            store,
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
            lm_head,
            vocab_out: v,
        })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vocab_out(&self) -> usize {
        self.vocab_out
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn embedding_ids(&self) -> [ParamId; 2] {
        [self.token_embedding, self.position_embedding]
    }

    pub fn freeze(&mut self, selector: FreezeSelector) {
        match selector {
            FreezeSelector::All => self.store.freeze_all(),
            FreezeSelector::EmbeddingsOnly => {
                for id in self.embedding_ids() {
                    self.store.freeze(id);
                }
            }
        }
    }

    /// Reinitializes the output projection to `d_model × vocab_out`.
    pub fn replace_head(&mut self, vocab_out: usize, seed: u64) -> Result<()> {
        if vocab_out == 0 {
            return Err(Error::Contract("replacement head needs vocab_out >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Tensor::randn(&[self.config.d_model, vocab_out], INIT_STD, &mut rng);
        self.store.replace(self.lm_head, head);
        self.vocab_out = vocab_out;
        Ok(())
    }

    /// Lower-triangular permit matrix for one sequence of `len` positions.
    pub fn causal_mask(&self, len: usize) -> Result<AttentionMask> {
        self.check_len(len)?;
        Ok(AttentionMask::causal(1, len))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 || len > self.config.max_len {
            return Err(Error::Capacity(format!(
                "sequence length {len} outside 1..={} (max_len)",
                self.config.max_len
            )));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId) -> Result<Var> {
        let w = tape.param(&self.store, w);
        tape.matmul(x, w)
    }

    fn norm(&self, tape: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let g = tape.param(&self.store, gain);
        let b = tape.param(&self.store, bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// `h + MultiHead(LayerNorm(h))` for layer `layer`.
    pub fn self_attention_block(
        &self,
        tape: &mut Tape,
        layer: usize,
        h: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let p = &self.blocks[layer];
        let x = self.norm(tape, h, p.ln1_gain, p.ln1_bias)?;
        let q = self.linear(tape, x, p.wq)?;
        let k = self.linear(tape, x, p.wk)?;
        let v = self.linear(tape, x, p.wv)?;
        let a = tape.attention(q, k, v, self.config.n_heads, mask)?;
        let o = self.linear(tape, a, p.wo)?;
        tape.add(h, o)
    }

    /// `h + W2·gelu(W1·LayerNorm(h))` for layer `layer`.
    pub fn feed_forward_block(&self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        let p = &self.blocks[layer];
        let x = self.norm(tape, h, p.ln2_gain, p.ln2_bias)?;
        let u = self.linear(tape, x, p.w1)?;
        let u = tape.gelu(u);
        let o = self.linear(tape, u, p.w2)?;
        tape.add(h, o)
    }

    /// Token plus position embeddings, `[batch·len, d_model]`.
    pub fn embed(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<Var> {
        self.check_len(batch.len)?;
        let tok = tape.param(&self.store, self.token_embedding);
        let pos = tape.param(&self.store, self.position_embedding);
        let t = tape.embedding(tok, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let p = tape.embedding(pos, &positions)?;
        tape.add(t, p)
    }

    /// Final hidden states of a single sequence, `[n, d_model]`.
    pub fn forward_hidden(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        self.forward_hidden_batch(tape, &SeqBatch::single(ids))
    }

    pub fn forward_hidden_batch(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<Var> {
        self.forward_hidden_with(tape, batch, |_, _, h| Ok(h))
    }

    /// Runs the stack, calling `after_layer(tape, layer, h)` after each
    /// layer's MLP block; its return value replaces the residual stream.
    pub fn forward_hidden_with<F>(
        &self,
        tape: &mut Tape,
        batch: &SeqBatch,
        mut after_layer: F,
    ) -> Result<Var>
    where
        F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
    {
        let mut h = self.embed(tape, batch)?;
        let mask = AttentionMask::causal(batch.batch, batch.len)
            .and(&AttentionMask::key_padding(batch.batch, batch.len, &batch.pad)?)?;
        for layer in 0..self.blocks.len() {
            h = self.self_attention_block(tape, layer, h, &mask)?;
            h = self.feed_forward_block(tape, layer, h)?;
            h = after_layer(tape, layer, h)?;
        }
        self.norm(tape, h, self.final_gain, self.final_bias)
    }

    /// `hidden · lm_head`, `[rows, vocab_out]`.
    pub fn lm_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let width = *tape.shape(hidden).last().unwrap_or(&0);
        if width != self.config.d_model {
            return Err(Error::Dimension {
                op: "lm_logits",
                lhs: tape.shape(hidden).to_vec(),
                rhs: vec![self.config.d_model, self.vocab_out],
            });
        }
        self.linear(tape, hidden, self.lm_head)
    }

    /// Hidden states then logits for a batch.
    pub fn forward_logits(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<Var> {
        let h = self.forward_hidden_batch(tape, batch)?;
        self.lm_logits(tape, h)
    }

    /// Number of parameters outside the token and position embeddings.
    pub fn non_embedding_count(&self) -> usize {
        let emb = self.embedding_ids();
        self.store
            .iter()
            .filter(|(id, _)| !emb.contains(id))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_layers: usize) -> StackConfig {
        StackConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_len: 6,
        }
    }

    fn hidden(stack: &TransformerStack, ids: &[usize]) -> Vec<f32> {
        let mut tape = Tape::new();
        let h = stack.forward_hidden(&mut tape, ids).unwrap();
        tape.value(h).to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1).validate().is_ok());
        let bad = StackConfig {
            n_heads: 3,
            ..cfg(1)
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn causal_mask_capacity() {
        let s = TransformerStack::new(cfg(1), 0).unwrap();
        assert_eq!(s.causal_mask(1).unwrap().permitted_pairs(), 1);
        assert_eq!(s.causal_mask(3).unwrap().permitted_pairs(), 6);
        assert!(matches!(s.causal_mask(7), Err(Error::Capacity(_))));
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let s = TransformerStack::new(cfg(2), 1).unwrap();
        let a = hidden(&s, &[1, 2, 3, 4, 5]);
        let b = hidden(&s, &[1, 2, 3, 9, 0]);
        let d = s.d_model();
        for (x, y) in a[..3 * d].iter().zip(&b[..3 * d]) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert_ne!(a[3 * d..], b[3 * d..]);
    }

    #[test]
    fn zero_output_projections_make_blocks_identities() {
        let mut s = TransformerStack::new(cfg(2), 2).unwrap();
        for l in 0..2 {
            let (wo, w2) = (s.blocks[l].wo, s.blocks[l].w2);
            s.store.replace(wo, Tensor::zeros(&[8, 8]));
            s.store.replace(w2, Tensor::zeros(&[16, 8]));
        }
        let mut z = s.clone();
        z.blocks.clear();
        assert_eq!(hidden(&s, &[3, 1, 4]), hidden(&z, &[3, 1, 4]));

        let mut tape = Tape::new();
        let h = tape.constant(vec![0.5; 16], &[2, 8]).unwrap();
        let mask = AttentionMask::causal(1, 2);
        let out = s.self_attention_block(&mut tape, 0, h, &mask).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        let out = s.feed_forward_block(&mut tape, 0, h).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn zero_layer_stack_is_normed_embeddings() {
        let s = TransformerStack::new(cfg(0), 3).unwrap();
        let mut tape = Tape::new();
        let e = s.embed(&mut tape, &SeqBatch::single(&[4, 2])).unwrap();
        let g = tape.constant(vec![1.0; 8], &[8]).unwrap();
        let b = tape.constant(vec![0.0; 8], &[8]).unwrap();
        let n = tape.layer_norm(e, g, b, LAYER_NORM_EPS).unwrap();
        assert_eq!(hidden(&s, &[4, 2]), tape.value(n));
    }

    #[test]
    fn shapes_and_determinism() {
        let s = TransformerStack::new(cfg(1), 4).unwrap();
        for n in 1..=6 {
            let ids: Vec<usize> = (0..n).collect();
            let mut tape = Tape::new();
            let h = s.forward_hidden(&mut tape, &ids).unwrap();
            assert_eq!(tape.shape(h), &[n, 8]);
            let l = s.lm_logits(&mut tape, h).unwrap();
            assert_eq!(tape.shape(l), &[n, 11]);
            assert_eq!(hidden(&s, &ids), hidden(&s, &ids));
        }
        let mut tape = Tape::new();
        assert!(matches!(
            s.forward_hidden(&mut tape, &[11]),
            Err(Error::Index { id: 11, .. })
        ));
        let bad = tape.constant(vec![0.0; 4], &[1, 4]).unwrap();
        assert!(matches!(
            s.lm_logits(&mut tape, bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut s = TransformerStack::new(cfg(1), 5).unwrap();
        s.store.replace(s.lm_head, Tensor::zeros(&[8, 11]));
        let mut tape = Tape::new();
        let h = s.forward_hidden(&mut tape, &[1, 2]).unwrap();
        let l = s.lm_logits(&mut tape, h).unwrap();
        let p = tape.softmax(l);
        assert!(tape.value(p).iter().all(|&x| (x - 1.0 / 11.0).abs() < 1e-7));
    }

    #[test]
    fn freeze_selectors() {
        let mut donor = TransformerStack::new(cfg(1), 6).unwrap();
        donor.freeze(FreezeSelector::All);
        assert_eq!(donor.store().trainable_count(), 0);
        let mut tape = Tape::new();
        let h = donor.forward_hidden(&mut tape, &[1, 2]).unwrap();
        assert!(!tape.requires_grad(h));

        let mut recv = TransformerStack::new(cfg(1), 7).unwrap();
        recv.freeze(FreezeSelector::EmbeddingsOnly);
        assert_eq!(recv.store().trainable_count(), recv.non_embedding_count());
        let mut tape = Tape::new();
        let logits = recv
            .forward_logits(&mut tape, &SeqBatch::single(&[1, 2, 3]))
            .unwrap();
        let loss = tape.cross_entropy(logits, &[2, 3, -1]).unwrap();
        let g = tape.backward(loss).unwrap();
        g.accumulate_into(&tape, recv.store_mut());
        let s = recv.store();
        assert!(s.tensor(recv.blocks[0].wq).grad().is_some());
        assert!(s.tensor(recv.token_embedding).grad().is_none());
        assert!(s.tensor(recv.position_embedding).grad().is_none());
    }

    #[test]
    fn replace_head_reinitializes() {
        let mut s = TransformerStack::new(cfg(1), 8).unwrap();
        s.freeze(FreezeSelector::All);
        let before = s.store().tensor(s.lm_head).clone();
        s.replace_head(11, 99).unwrap();
        let after = s.store().tensor(s.lm_head);
        assert_ne!(before.data(), after.data());
        assert!(after.requires_grad());
        s.replace_head(5, 1).unwrap();
        assert_eq!(s.vocab_out(), 5);
        let mut tape = Tape::new();
        let l = s
            .forward_logits(&mut tape, &SeqBatch::single(&[1, 2, 3]))
            .unwrap();
        assert_eq!(tape.shape(l), &[3, 5]);
    }
}
