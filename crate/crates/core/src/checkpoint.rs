//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XABR" | version: u32 | count: u32 | entry*count
//! entry = name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | dims: u32*rank | payload
//! ```
//!
//! Dtype tags: 0 = f32, 1 = u8, 2 = u64. Parameters are stored under
//! `{store}.{name}`, freeze flags under `frozen.{store}` (one byte per
//! parameter), optimizer moments under `optim.m.*` / `optim.v.*`, and the
//! model and trainer configuration as JSON bytes under `meta.*`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bridge::BridgeConfig;
use crate::combined::{CombinedModel, GroupKind, LanguageModel, MemoryVisibility, ModelOutput};
use crate::error::{Error, Result};
use crate::optim::{EpochRecord, Moments, TrainConfig, TrainState};
use crate::tensor::ParamStore;
use crate::transformer::{SeqBatch, StackConfig, TransformerStack};

pub const MAGIC: &[u8; 4] = b"XABR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Array {
    fn tag(&self) -> u8 {
        match self {
            Array::F32(_) => 0,
            Array::U8(_) => 1,
            Array::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Array::F32(v) => v.len(),
            Array::U8(v) => v.len(),
            Array::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Array,
    /// Byte offset of the entry in the file it was read from.
    pub offset: u64,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Array) -> Self {
        Entry {
            name: name.into(),
            dims: dims.to_vec(),
            data,
            offset: 0,
        }
    }

    fn bytes(name: &str, bytes: &[u8]) -> Self {
        Entry::new(name, &[bytes.len()], Array::U8(bytes.to_vec()))
    }
}

/// A flat list of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCheckpoint {
    pub entries: Vec<Entry>,
}

impl RawCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.tag());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                Array::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Array::U8(v) => out.extend_from_slice(v),
                Array::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(fmt_err(0, format!("bad magic {magic:?}, expected \"XABR\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let offset = r.pos as u64;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| fmt_err(offset + 4, "entry name is not valid UTF-8".into()))?
                .to_owned();
            let tag_at = r.pos as u64;
            let tag = r.take(1, "dtype")?[0];
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt_err(tag_at, format!("dims {dims:?} of {name} overflow")))?;
            let data = match tag {
                0 => Array::F32(
                    r.take(numel.saturating_mul(4), &name)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Array::U8(r.take(numel, &name)?.to_vec()),
                2 => Array::U64(
                    r.take(numel.saturating_mul(8), &name)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(fmt_err(tag_at, format!("unknown dtype tag {t} for {name}"))),
            };
            entries.push(Entry {
                name,
                dims,
                data,
                offset,
            });
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(
                r.pos as u64,
                format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            ));
        }
        Ok(RawCheckpoint { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn fmt_err(offset: u64, msg: String) -> Error {
    Error::Format { offset, msg }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(fmt_err(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Configuration of a combined model as recorded in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinedSpec {
    pub donor: StackConfig,
    pub receiver: StackConfig,
    pub bridge: BridgeConfig,
    pub full_memory: bool,
}

/// Either kind of model a checkpoint can hold.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Stack(TransformerStack),
    Combined(CombinedModel),
}

impl AnyModel {
    fn kind(&self) -> &'static str {
        match self {
            AnyModel::Stack(_) => "stack",
            AnyModel::Combined(_) => "combined",
        }
    }

    /// Prefix of each store, in `stores()` order.
    fn prefixes(&self) -> &'static [&'static str] {
        match self {
            AnyModel::Stack(_) => &["stack"],
            AnyModel::Combined(_) => &["bridge", "receiver", "donor"],
        }
    }

    fn config_json(&self) -> String {
        match self {
            AnyModel::Stack(s) => serde_json::to_string(s.config()),
            AnyModel::Combined(c) => serde_json::to_string(&CombinedSpec {
                donor: c.donor.config().clone(),
                receiver: c.receiver.config().clone(),
                bridge: c.bridges.config().clone(),
                full_memory: c.visibility() == MemoryVisibility::Full,
            }),
        }
        .expect("configs serialize")
    }

    fn skeleton(kind: &str, config: &str, offset: u64) -> Result<Self> {
        let bad = |e: serde_json::Error| fmt_err(offset, format!("bad model config: {e}"));
        match kind {
            "stack" => Ok(AnyModel::Stack(TransformerStack::new(
                serde_json::from_str(config).map_err(bad)?,
                0,
            )?)),
            "combined" => {
                let spec: CombinedSpec = serde_json::from_str(config).map_err(bad)?;
                let mut m = CombinedModel::new(spec.donor, spec.receiver, spec.bridge, 0)?;
                if spec.full_memory {
                    m.set_visibility(MemoryVisibility::Full);
                }
                Ok(AnyModel::Combined(m))
            }
            other => Err(fmt_err(offset, format!("unknown model kind {other:?}"))),
        }
    }

    pub fn as_combined(&self) -> Option<&CombinedModel> {
        match self {
            AnyModel::Combined(c) => Some(c),
            AnyModel::Stack(_) => None,
        }
    }

    pub fn into_stack(self) -> Option<TransformerStack> {
        match self {
            AnyModel::Stack(s) => Some(s),
            AnyModel::Combined(_) => None,
        }
    }
}

impl LanguageModel for AnyModel {
    fn forward(&self, tape: &mut Tape, batch: &SeqBatch) -> Result<ModelOutput> {
        match self {
            AnyModel::Stack(m) => m.forward(tape, batch),
            AnyModel::Combined(m) => m.forward(tape, batch),
        }
    }
    fn max_input_len(&self) -> usize {
        match self {
            AnyModel::Stack(m) => m.max_input_len(),
            AnyModel::Combined(m) => m.max_input_len(),
        }
    }
    fn window(&self, len: usize) -> usize {
        match self {
            AnyModel::Stack(m) => LanguageModel::window(m, len),
            AnyModel::Combined(m) => m.window(len),
        }
    }
    fn vocab_out(&self) -> usize {
        match self {
            AnyModel::Stack(m) => LanguageModel::vocab_out(m),
            AnyModel::Combined(m) => m.vocab_out(),
        }
    }
    fn hard_input_limit(&self) -> bool {
        match self {
            AnyModel::Stack(m) => m.hard_input_limit(),
            AnyModel::Combined(m) => m.hard_input_limit(),
        }
    }
    fn stores(&self) -> Vec<(GroupKind, &ParamStore)> {
        match self {
            AnyModel::Stack(m) => m.stores(),
            AnyModel::Combined(m) => m.stores(),
        }
    }
    fn stores_mut(&mut self) -> Vec<(GroupKind, &mut ParamStore)> {
        match self {
            AnyModel::Stack(m) => m.stores_mut(),
            AnyModel::Combined(m) => m.stores_mut(),
        }
    }
}

/// Trainer bookkeeping stored next to the moments.
#[derive(Serialize, Deserialize)]
struct StateMeta {
    best_val_loss: Option<f32>,
    epochs_since_improvement: usize,
    history: Vec<EpochRecord>,
    step_losses: Vec<f32>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub state: Option<TrainState>,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(model: AnyModel) -> Self {
        Checkpoint {
            model,
            state: None,
            train: None,
        }
    }

    pub fn to_raw(&self) -> RawCheckpoint {
        let m = &self.model;
        let mut entries = vec![
            Entry::bytes("meta.kind", m.kind().as_bytes()),
            Entry::bytes("meta.config", m.config_json().as_bytes()),
        ];
        if let Some(train) = &self.train {
            let json = serde_json::to_string(train).expect("train config serializes");
            entries.push(Entry::bytes("meta.train", json.as_bytes()));
        }
        for ((_, store), prefix) in m.stores().into_iter().zip(m.prefixes()) {
            let flags: Vec<u8> = store.iter().map(|(_, p)| u8::from(p.is_frozen())).collect();
            entries.push(Entry::new(format!("frozen.{prefix}"), &[flags.len()], Array::U8(flags)));
            for (_, p) in store.iter() {
                entries.push(Entry::new(
                    format!("{prefix}.{}", p.name),
                    p.tensor.shape(),
                    Array::F32(p.tensor.data().to_vec()),
                ));
            }
        }
        if let Some(st) = &self.state {
            entries.push(Entry::new("optim.step", &[1], Array::U64(vec![st.step])));
            let meta = StateMeta {
                best_val_loss: st.best_val_loss.is_finite().then_some(st.best_val_loss),
                epochs_since_improvement: st.epochs_since_improvement,
                history: st.history.clone(),
                step_losses: st.step_losses.clone(),
            };
            let json = serde_json::to_string(&meta).expect("state serializes");
            entries.push(Entry::bytes("meta.state", json.as_bytes()));
            for (si, ((_, store), prefix)) in m.stores().into_iter().zip(m.prefixes()).enumerate() {
                for (id, p) in store.iter() {
                    if let Some(Some(mom)) = st.moments.get(si).and_then(|s| s.get(id.0)) {
                        let dims = p.tensor.shape();
                        entries.push(Entry::new(
                            format!("optim.m.{prefix}.{}", p.name),
                            dims,
                            Array::F32(mom.m.clone()),
                        ));
                        entries.push(Entry::new(
                            format!("optim.v.{prefix}.{}", p.name),
                            dims,
                            Array::F32(mom.v.clone()),
                        ));
                    }
                }
            }
        }
        RawCheckpoint { entries }
    }

    pub fn from_raw(raw: &RawCheckpoint) -> Result<Self> {
        let text = |name: &str| -> Result<(String, u64)> {
            let e = raw
                .get(name)
                .ok_or_else(|| fmt_err(0, format!("missing entry {name}")))?;
            match &e.data {
                Array::U8(b) => String::from_utf8(b.clone())
                    .map(|s| (s, e.offset))
                    .map_err(|_| fmt_err(e.offset, format!("{name} is not UTF-8"))),
                _ => Err(fmt_err(e.offset, format!("{name} must be a u8 array"))),
            }
        };
        let (kind, kind_at) = text("meta.kind")?;
        let (config, config_at) = text("meta.config")?;
        let mut model = AnyModel::skeleton(&kind, &config, config_at.max(kind_at))?;
        let train = match raw.get("meta.train") {
            Some(_) => {
                let (json, at) = text("meta.train")?;
                Some(
                    serde_json::from_str(&json)
                        .map_err(|e| fmt_err(at, format!("bad train config: {e}")))?,
                )
            }
            None => None,
        };
        let prefixes = model.prefixes();
        let has_state = raw.get("optim.step").is_some();
        let mut state = has_state.then(|| TrainState::new(&model));
        let mut seen = vec![false; raw.entries.len()];
        for (i, e) in raw.entries.iter().enumerate() {
            if e.name.starts_with("meta.") || e.name == "optim.step" {
                seen[i] = true;
            }
        }
        let position = |name: &str| raw.entries.iter().position(|e| e.name == name);
        let end = raw.encode().len() as u64;
        for (si, ((_, store), prefix)) in model.stores_mut().into_iter().zip(prefixes).enumerate() {
            let flags_name = format!("frozen.{prefix}");
            let fi = position(&flags_name)
                .ok_or_else(|| fmt_err(end, format!("missing entry {flags_name}")))?;
            seen[fi] = true;
            let flags = match &raw.entries[fi].data {
                Array::U8(f) if f.len() == store.len() => f.clone(),
                _ => {
                    return Err(fmt_err(
                        raw.entries[fi].offset,
                        format!("{flags_name} must hold {} u8 flags", store.len()),
                    ))
                }
            };
            let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
            for (id, frozen) in ids.into_iter().zip(flags) {
                let name = format!("{prefix}.{}", store.get(id).name);
                let ei = position(&name)
                    .ok_or_else(|| fmt_err(end, format!("missing tensor {name}")))?;
                seen[ei] = true;
                let e = &raw.entries[ei];
                let p = store.get_mut(id);
                let values = f32_payload(e, p.tensor.shape())?;
                p.tensor.data_mut().copy_from_slice(values);
                p.tensor.set_requires_grad(frozen == 0);
                if let Some(st) = state.as_mut() {
                    let mut moment = |kind: &str| -> Result<Option<Vec<f32>>> {
                        let n = format!("optim.{kind}.{name}");
                        match position(&n) {
                            Some(mi) => {
                                seen[mi] = true;
                                Ok(Some(f32_payload(&raw.entries[mi], p.tensor.shape())?.to_vec()))
                            }
                            None => Ok(None),
                        }
                    };
                    if let (Some(m), Some(v)) = (moment("m")?, moment("v")?) {
                        st.moments[si][id.0] = Some(Moments { m, v });
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let e = &raw.entries[i];
            return Err(fmt_err(e.offset, format!("unknown tensor name {:?}", e.name)));
        }
        if let Some(st) = state.as_mut() {
            let e = raw.get("optim.step").expect("checked");
            st.step = match &e.data {
                Array::U64(v) if v.len() == 1 => v[0],
                _ => return Err(fmt_err(e.offset, "optim.step must be one u64".into())),
            };
            if raw.get("meta.state").is_some() {
                let (json, at) = text("meta.state")?;
                let meta: StateMeta = serde_json::from_str(&json)
                    .map_err(|e| fmt_err(at, format!("bad trainer state: {e}")))?;
                st.best_val_loss = meta.best_val_loss.unwrap_or(f32::INFINITY);
                st.epochs_since_improvement = meta.epochs_since_improvement;
                st.history = meta.history;
                st.step_losses = meta.step_losses;
            }
        }
        Ok(Checkpoint {
            model,
            state,
            train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_raw().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(&RawCheckpoint::read(path)?)
    }
}

fn f32_payload<'a>(e: &'a Entry, shape: &[usize]) -> Result<&'a [f32]> {
    match &e.data {
        Array::F32(v) if e.dims == shape && v.len() == e.data.len() => Ok(v),
        Array::F32(_) => Err(fmt_err(
            e.offset,
            format!("{} has dims {:?}, expected {shape:?}", e.name, e.dims),
        )),
        _ => Err(fmt_err(e.offset, format!("{} must be f32", e.name))),
    }
}
