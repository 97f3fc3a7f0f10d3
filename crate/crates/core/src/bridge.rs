//! Enhanced cross-attention bridges from donor representations into the
//! receiver's residual stream.
//!
//! Each bridge runs four stages:
//!
//! 1. a linear projection from donor width to receiver width,
//! 2. a residual bottleneck adapter over the projected memory,
//! 3. multi-head cross-attention from normalized receiver states into that memory,
//! 4. a per-feature sigmoid gate that blends the attended states into the
//!    receiver's own states.
//!
//! The attention output projection and the adapter's up-projection start at
//! zero, so a fresh bridge passes receiver states through unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tensor};
use crate::transformer::{INIT_STD, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    /// Receiver layers followed by a bridge, strictly increasing.
    pub placement: Vec<usize>,
    pub d_adapter: usize,
    pub n_bridge_heads: usize,
    pub gate_bias_init: f32,
}

impl BridgeConfig {
    /// One bridge after every receiver layer, adapter width `d_recv / 4`.
    pub fn default_for(n_layers: usize, d_recv: usize, n_heads: usize) -> Self {
        BridgeConfig {
            placement: (0..n_layers).collect(),
            d_adapter: (d_recv / 4).max(1),
            n_bridge_heads: n_heads,
            gate_bias_init: -2.0,
        }
    }

    pub fn validate(&self, receiver_layers: usize, d_recv: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.placement.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "bridge placement {:?} must be strictly increasing",
                self.placement
            ));
        }
        if let Some(&l) = self.placement.iter().find(|&&l| l >= receiver_layers) {
            return bad(format!(
                "bridge placement {l} out of range for {receiver_layers} receiver layers"
            ));
        }
        if self.d_adapter == 0 || self.d_adapter >= d_recv {
            return bad(format!(
                "d_adapter {} must be in 1..{d_recv} (bottleneck)",
                self.d_adapter
            ));
        }
        if self.n_bridge_heads == 0 || d_recv % self.n_bridge_heads != 0 {
            return bad(format!(
                "n_bridge_heads {} does not divide receiver width {d_recv}",
                self.n_bridge_heads
            ));
        }
        if !self.gate_bias_init.is_finite() {
            return bad("gate_bias_init must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BridgeLayer {
    pub receiver_layer: usize,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub adapter_down: ParamId,
    pub adapter_down_b: ParamId,
    pub adapter_up: ParamId,
    pub adapter_up_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

/// All bridges of one combined model, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Bridges {
    config: BridgeConfig,
    d_donor: usize,
    d_recv: usize,
    store: ParamStore,
    layers: Vec<BridgeLayer>,
}

impl Bridges {
    pub fn new(
        config: BridgeConfig,
        d_donor: usize,
        d_recv: usize,
        receiver_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate(receiver_layers, d_recv)?;
        if d_donor == 0 {
            return Err(Error::Config("donor width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (dd, dr, da) = (d_donor, d_recv, config.d_adapter);
        let mut layers = Vec::with_capacity(config.placement.len());
        for (i, &receiver_layer) in config.placement.iter().enumerate() {
            let p = |s: &str| format!("{i}.{s}");
            let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
            layers.push(BridgeLayer {
                receiver_layer,
                proj_w: store.add(p("proj.w"), ParamKind::Matrix, randn(&[dd, dr])),
                proj_b: store.add(p("proj.b"), ParamKind::Bias, Tensor::zeros(&[dr])),
                adapter_down: store.add(p("adapter.down"), ParamKind::Matrix, randn(&[dr, da])),
                adapter_down_b: store.add(p("adapter.down_b"), ParamKind::Bias, Tensor::zeros(&[da])),
                adapter_up: store.add(p("adapter.up"), ParamKind::Matrix, Tensor::zeros(&[da, dr])),
                adapter_up_b: store.add(p("adapter.up_b"), ParamKind::Bias, Tensor::zeros(&[dr])),
                ln_gain: store.add(p("ln.gain"), ParamKind::Gain, Tensor::full(&[dr], 1.0)),
                ln_bias: store.add(p("ln.bias"), ParamKind::Bias, Tensor::zeros(&[dr])),
                wq: store.add(p("xattn.wq"), ParamKind::Matrix, randn(&[dr, dr])),
                wk: store.add(p("xattn.wk"), ParamKind::Matrix, randn(&[dr, dr])),
                wv: store.add(p("xattn.wv"), ParamKind::Matrix, randn(&[dr, dr])),
                wo: store.add(p("xattn.wo"), ParamKind::Matrix, Tensor::zeros(&[dr, dr])),
                gate_w: store.add(p("gate.w"), ParamKind::Matrix, randn(&[2 * dr, dr])),
                gate_b: store.add(
                    p("gate.b"),
                    ParamKind::Bias,
                    Tensor::full(&[dr], config.gate_bias_init),
                ),
            });
        }
        Ok(Bridges {
            config,
            d_donor,
            d_recv,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn layers(&self) -> &[BridgeLayer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d_donor(&self) -> usize {
        self.d_donor
    }

    pub fn d_recv(&self) -> usize {
        self.d_recv
    }

    /// Index of the bridge placed after receiver layer `layer`.
    pub fn for_receiver_layer(&self, layer: usize) -> Option<usize> {
        self.config.placement.binary_search(&layer).ok()
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.store, id)
    }

    /// `H_donor · proj_W + proj_b`.
    pub fn project_donor(&self, tape: &mut Tape, bridge: usize, donor: Var) -> Result<Var> {
        let width = *tape.shape(donor).last().unwrap_or(&0);
        if width != self.d_donor {
            return Err(Error::Dimension {
                op: "project_donor",
                lhs: tape.shape(donor).to_vec(),
                rhs: vec![self.d_donor, self.d_recv],
            });
        }
        let l = &self.layers[bridge];
        let w = self.p(tape, l.proj_w);
        let b = self.p(tape, l.proj_b);
        let x = tape.matmul(donor, w)?;
        tape.add_bias(x, b)
    }

    /// `x + gelu(x·down + b_down)·up + b_up`.
    pub fn adapter_transform(&self, tape: &mut Tape, bridge: usize, x: Var) -> Result<Var> {
        let l = &self.layers[bridge];
        let down = self.p(tape, l.adapter_down);
        let down_b = self.p(tape, l.adapter_down_b);
        let up = self.p(tape, l.adapter_up);
        let up_b = self.p(tape, l.adapter_up_b);
        let z = tape.matmul(x, down)?;
        let z = tape.add_bias(z, down_b)?;
        let z = tape.gelu(z);
        let z = tape.matmul(z, up)?;
        let z = tape.add_bias(z, up_b)?;
        tape.add(x, z)
    }

    /// Multi-head attention with queries from `LayerNorm(h_recv)` and keys
    /// and values from `mem`, followed by the output projection. `mask` is
    /// `[batch, n, m]`; a query with no visible memory row is a contract error.
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        bridge: usize,
        h_recv: Var,
        mem: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        Ok(self.cross_attend_traced(tape, bridge, h_recv, mem, mask)?.output)
    }

    fn cross_attend_traced(
        &self,
        tape: &mut Tape,
        bridge: usize,
        h_recv: Var,
        mem: Var,
        mask: &AttentionMask,
    ) -> Result<BridgeOutput> {
        let l = &self.layers[bridge];
        let g = self.p(tape, l.ln_gain);
        let b = self.p(tape, l.ln_bias);
        let x = tape.layer_norm(h_recv, g, b, LAYER_NORM_EPS)?;
        let wq = self.p(tape, l.wq);
        let wk = self.p(tape, l.wk);
        let wv = self.p(tape, l.wv);
        let wo = self.p(tape, l.wo);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(mem, wk)?;
        let v = tape.matmul(mem, wv)?;
        let attention = tape.attention(q, k, v, self.config.n_bridge_heads, mask)?;
        let output = tape.matmul(attention, wo)?;
        Ok(BridgeOutput { output, attention })
    }

    /// Per-feature gate values `sigmoid([h_self ‖ h_ext]·gate_W + gate_b)`.
    pub fn gate(&self, tape: &mut Tape, bridge: usize, h_self: Var, h_ext: Var) -> Result<Var> {
        if tape.shape(h_self) != tape.shape(h_ext) {
            return Err(Error::Dimension {
                op: "gated_blend",
                lhs: tape.shape(h_self).to_vec(),
                rhs: tape.shape(h_ext).to_vec(),
            });
        }
        let l = &self.layers[bridge];
        let w = self.p(tape, l.gate_w);
        let b = self.p(tape, l.gate_b);
        let cat = tape.concat_last(h_self, h_ext)?;
        let pre = tape.matmul(cat, w)?;
        let pre = tape.add_bias(pre, b)?;
        Ok(tape.sigmoid(pre))
    }

    /// `g⊙h_ext + (1−g)⊙h_self`, evaluated as `h_self + g⊙(h_ext − h_self)`.
    pub fn gated_blend(
        &self,
        tape: &mut Tape,
        bridge: usize,
        h_self: Var,
        h_ext: Var,
    ) -> Result<Var> {
        let g = self.gate(tape, bridge, h_self, h_ext)?;
        let diff = tape.sub(h_ext, h_self)?;
        let mix = tape.mul(g, diff)?;
        tape.add(h_self, mix)
    }

    /// Full bridge: project and adapt donor states, cross-attend from the
    /// receiver residual stream, then gate the attended stream back in.
    pub fn bridge_forward(
        &self,
        tape: &mut Tape,
        bridge: usize,
        h_recv: Var,
        donor: Var,
        mask: &AttentionMask,
    ) -> Result<BridgeOutput> {
        let mem = self.project_donor(tape, bridge, donor)?;
        let mem = self.adapter_transform(tape, bridge, mem)?;
        let attended = self.cross_attend_traced(tape, bridge, h_recv, mem, mask)?;
        let h_ext = tape.add(h_recv, attended.output)?;
        let out = self.gated_blend(tape, bridge, h_recv, h_ext)?;
        Ok(BridgeOutput {
            output: out,
            attention: attended.attention,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BridgeOutput {
    pub output: Var,
    /// The cross-attention node; see [`Tape::attention_probs`].
    pub attention: Var,
}

/// Visibility of donor memory for receiver queries.
///
/// Memory rows flagged as padding are hidden. With `aligned_offset =
/// Some(o)`, receiver query `i` sits at absolute position `o + i` and sees
/// memory rows up to that position only.
pub fn memory_mask(
    batch: usize,
    queries: usize,
    donor_pad: &[bool],
    aligned_offset: Option<usize>,
) -> Result<AttentionMask> {
    let pad = AttentionMask::key_padding(batch, queries, donor_pad)?;
    match aligned_offset {
        None => Ok(pad),
        Some(offset) => {
            let keys = pad.dims()[2];
            pad.and(&AttentionMask::aligned(batch, queries, keys, offset))
        }
    }
}
