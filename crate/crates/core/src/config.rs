//! Run configuration files (JSON).
//!
//! ```json
//! {
//!   "donor":    {"n_layers": 4, "d_model": 64, "n_heads": 4, "d_ff": 256, "max_len": 128},
//!   "receiver": {"n_layers": 2, "d_model": 32, "n_heads": 4, "d_ff": 128, "max_len": 64},
//!   "bridge":   {"placement": [0, 1], "d_adapter": 8, "n_bridge_heads": 4, "gate_bias_init": -2.0},
//!   "train":    {"epochs": 15, "batch_size": 16, "lr_bridge": 1e-4, "lr_receiver": 5e-5,
//!                "weight_decay": 0.01, "patience": 3, "min_delta": 1e-3, "seed": 42,
//!                "max_tokens": 4096, "val_fraction": 0.1}
//! }
//! ```
//!
//! Vocabulary size is not configurable; it always comes from the tokenizer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::transformer::StackConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl StackSection {
    pub fn stack_config(&self) -> StackConfig {
        StackConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: VOCAB_SIZE,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub donor: StackSection,
    pub receiver: StackSection,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let donor = self.donor();
        let receiver = self.receiver();
        donor.validate()?;
        receiver.validate()?;
        self.bridge.validate(receiver.n_layers, receiver.d_model)?;
        self.train.validate()
    }

    pub fn donor(&self) -> StackConfig {
        self.donor.stack_config()
    }

    pub fn receiver(&self) -> StackConfig {
        self.receiver.stack_config()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
