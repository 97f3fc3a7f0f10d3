//! Dense f32 tensors and the named parameter stores that own model weights.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Flat row-major f32 array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            data,
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape).expect("zeros shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor::new(vec![value; numel], shape).expect("full shape")
    }

    /// Samples every entry from N(0, std²).
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::new(data, shape).expect("randn shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any gradient already accumulated.
    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. No-op for tensors that do not require grad.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// What a parameter is, for weight-decay and freezing decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Matrix,
    Bias,
    Gain,
    Embedding,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Matrix => 0,
            ParamKind::Bias => 1,
            ParamKind::Gain => 2,
            ParamKind::Embedding => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Matrix,
            1 => ParamKind::Bias,
            2 => ParamKind::Gain,
            3 => ParamKind::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

impl Param {
    pub fn is_frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Identifies one parameter of one store on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub id: ParamId,
}

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Ordered, named collection of parameters belonging to one model component.
///
/// Every store carries a process-unique id so that gradients recorded on a
/// tape can be routed back to the store that owns the parameter. Cloning a
/// store assigns a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: fresh_uid(),
            params: self.params.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: fresh_uid(),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a trainable parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            kind,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.uid,
            id,
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].tensor.set_requires_grad(false);
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(false);
        }
    }

    /// Replaces a parameter's tensor in place; the replacement is trainable.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) {
        self.params[id.0].tensor = tensor.with_requires_grad(true);
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.is_frozen())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// FNV-1a over names and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }

    pub fn checksum_where(&self, mut keep: impl FnMut(&Param) -> bool) -> u64 {
        let mut h = Fnv::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.write(p.name.as_bytes());
            for v in p.tensor.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
