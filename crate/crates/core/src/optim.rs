//! Parameter groups and the AdamW update with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::combined::{GroupKind, LanguageModel};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind};

fn default_betas() -> (f32, f32) {
    (0.9, 0.999)
}

fn default_eps() -> f32 {
    1e-8
}

fn default_clip() -> Option<f32> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_bridge: f32,
    pub lr_receiver: f32,
    pub weight_decay: f32,
    pub patience: usize,
    pub min_delta: f32,
    pub seed: u64,
    pub max_tokens: usize,
    pub val_fraction: f32,
    #[serde(skip, default = "default_betas")]
    pub betas: (f32, f32),
    #[serde(skip, default = "default_eps")]
    pub eps: f32,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(skip, default = "default_clip")]
    pub grad_clip: Option<f32>,
    /// Stops after this many optimizer steps regardless of epochs.
    #[serde(skip)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr_bridge: 1e-4,
            lr_receiver: 5e-5,
            weight_decay: 0.01,
            patience: 3,
            min_delta: 1e-3,
            seed: 42,
            max_tokens: 4096,
            val_fraction: 0.1,
            betas: default_betas(),
            eps: default_eps(),
            grad_clip: default_clip(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_owned()));
        if !(self.lr_bridge > 0.0 && self.lr_receiver > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return bad("weight_decay and min_delta must be non-negative");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.max_tokens < 2 {
            return bad("max_tokens must be at least 2");
        }
        Ok(())
    }

    pub fn lr(&self, kind: GroupKind) -> f32 {
        match kind {
            GroupKind::Bridge => self.lr_bridge,
            GroupKind::Receiver => self.lr_receiver,
        }
    }
}

/// A parameter of a model: index into `LanguageModel::stores` plus id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub store: usize,
    pub id: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub lr: f32,
    pub members: Vec<ParamRef>,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// One group per kind holding every trainable parameter of that kind.
/// Frozen parameters land in no group.
pub fn param_groups<M: LanguageModel + ?Sized>(model: &M, config: &TrainConfig) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for (store_idx, (kind, store)) in model.stores().into_iter().enumerate() {
        let members = store
            .iter()
            .filter(|(_, p)| !p.is_frozen())
            .map(|(id, _)| ParamRef {
                store: store_idx,
                id,
            });
        match groups.iter_mut().find(|g| g.kind == kind) {
            Some(g) => g.members.extend(members),
            None => groups.push(ParamGroup {
                kind,
                lr: config.lr(kind),
                members: members.collect(),
            }),
        }
    }
    groups.retain(|g| !g.members.is_empty());
    groups
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub steps: u64,
}

/// Optimizer moments, step counter and early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// `moments[store][param]`, allocated on first update.
    pub moments: Vec<Vec<Option<Moments>>>,
    pub step: u64,
    pub best_val_loss: f32,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f32>,
}

impl TrainState {
    pub fn new<M: LanguageModel + ?Sized>(model: &M) -> Self {
        TrainState {
            moments: model
                .stores()
                .iter()
                .map(|(_, s)| vec![None; s.len()])
                .collect(),
            step: 0,
            best_val_loss: f32::INFINITY,
            epochs_since_improvement: 0,
            history: Vec::new(),
            step_losses: Vec::new(),
        }
    }

    pub fn moments(&self, r: ParamRef) -> Option<&Moments> {
        self.moments.get(r.store)?.get(r.id.0)?.as_ref()
    }

    /// Records an epoch's validation loss; returns `true` once patience is exhausted.
    pub fn observe_val(&mut self, val_loss: f32, min_delta: f32, patience: usize) -> bool {
        if val_loss < self.best_val_loss - min_delta {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement >= patience
    }
}

/// Clips the global gradient norm over every group member, then applies
/// AdamW to each member with its group's learning rate, and clears all
/// gradients. Weight decay touches matrix parameters only.
pub fn adamw_step<M: LanguageModel + ?Sized>(
    model: &mut M,
    state: &mut TrainState,
    groups: &[ParamGroup],
    config: &TrainConfig,
) -> Result<()> {
    let mut stores = model.stores_mut();
    let mut sq = 0.0f64;
    for g in groups {
        for r in &g.members {
            let p = stores[r.store].1.get(r.id);
            let grad = p.tensor.grad().ok_or_else(|| {
                Error::Contract(format!("trainable parameter {} has no gradient", p.name))
            })?;
            sq += grad.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>();
        }
    }
    let clip = match config.grad_clip {
        Some(max) if sq.sqrt() > f64::from(max) => f64::from(max) / sq.sqrt(),
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (f64::from(config.betas.0), f64::from(config.betas.1));
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let eps = f64::from(config.eps);
    for g in groups {
        let lr = f64::from(g.lr);
        for r in &g.members {
            let param = stores[r.store].1.get_mut(r.id);
            let decay = if param.kind == ParamKind::Matrix {
                f64::from(config.weight_decay)
            } else {
                0.0
            };
            let n = param.tensor.numel();
            let slot = &mut state.moments[r.store][r.id.0];
            let mom = slot.get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad = param.tensor.grad().expect("checked above").to_vec();
            let data = param.tensor.data_mut();
            for i in 0..n {
                let gi = f64::from(grad[i]) * clip;
                let m = b1 * f64::from(mom.m[i]) + (1.0 - b1) * gi;
                let v = b2 * f64::from(mom.v[i]) + (1.0 - b2) * gi * gi;
                mom.m[i] = m as f32;
                mom.v[i] = v as f32;
                let theta = f64::from(data[i]);
                let update = lr * decay * theta + lr * (m / c1) / ((v / c2).sqrt() + eps);
                data[i] = (theta - update) as f32;
            }
        }
    }
    for (_, s) in stores.iter_mut() {
        s.zero_grads();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};
    use crate::transformer::{SeqBatch, StackConfig, TransformerStack};
    use crate::autograd::Tape;
    use crate::combined::ModelOutput;

    /// One-store model over a single parameter, for closed-form checks.
    struct Scalar(ParamStore);

    impl LanguageModel for Scalar {
        fn forward(&self, _: &mut Tape, _: &SeqBatch) -> Result<ModelOutput> {
            unimplemented!()
        }
        fn max_input_len(&self) -> usize {
            1
        }
        fn window(&self, len: usize) -> usize {
            len
        }
        fn vocab_out(&self) -> usize {
            1
        }
        fn stores(&self) -> Vec<(GroupKind, &ParamStore)> {
            vec![(GroupKind::Receiver, &self.0)]
        }
        fn stores_mut(&mut self) -> Vec<(GroupKind, &mut ParamStore)> {
            vec![(GroupKind::Receiver, &mut self.0)]
        }
    }

    fn one_step(wd: f32) -> f32 {
        let mut store = ParamStore::new();
        let id = store.add("theta", ParamKind::Matrix, Tensor::full(&[1], 1.0));
        store.get_mut(id).tensor.accumulate_grad(&[1.0]);
        let mut model = Scalar(store);
        let config = TrainConfig {
            lr_receiver: 0.1,
            weight_decay: wd,
            ..TrainConfig::default()
        };
        let groups = param_groups(&model, &config);
        let mut state = TrainState::new(&model);
        adamw_step(&mut model, &mut state, &groups, &config).unwrap();
        assert!(model.0.tensor(id).grad().is_none());
        model.0.tensor(id).data()[0]
    }

    #[test]
    fn closed_form_first_steps() {
        assert!((one_step(0.0) - 0.9).abs() < 1e-6);
        assert!((one_step(0.01) - 0.899).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("lonely", ParamKind::Bias, Tensor::full(&[2], 1.0));
        let mut model = Scalar(store);
        let config = TrainConfig::default();
        let groups = param_groups(&model, &config);
        let mut state = TrainState::new(&model);
        let err = adamw_step(&mut model, &mut state, &groups, &config).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn frozen_parameters_are_in_no_group() {
        let mut s = TransformerStack::new(
            StackConfig {
                n_layers: 1,
                d_model: 4,
                n_heads: 1,
                d_ff: 8,
                vocab_size: 5,
                max_len: 4,
            },
            0,
        )
        .unwrap();
        s.freeze(crate::transformer::FreezeSelector::EmbeddingsOnly);
        let groups = param_groups(&s, &TrainConfig::default());
        assert_eq!(groups.len(), 1);
        let members = &groups[0].members;
        assert!(!members.iter().any(|r| s.embedding_ids().contains(&r.id)));
        let count: usize = members.iter().map(|r| s.store().tensor(r.id).numel()).sum();
        assert_eq!(count, s.store().trainable_count());
    }

    #[test]
    fn early_stopping_bookkeeping() {
        let mut st = TrainState {
            moments: vec![],
            step: 0,
            best_val_loss: f32::INFINITY,
            epochs_since_improvement: 0,
            history: vec![],
            step_losses: vec![],
        };
        assert!(!st.observe_val(2.0, 1e-3, 2));
        assert!(!st.observe_val(1.9995, 1e-3, 2));
        assert!(st.observe_val(2.5, 1e-3, 2));
        assert_eq!(st.best_val_loss, 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_bridge: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
