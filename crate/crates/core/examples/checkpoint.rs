//! Train a small combined model for one epoch, save it, reload it and confirm
//! the reloaded model produces identical logits.

use xabr::bridge::BridgeConfig;
use xabr::checkpoint::{AnyModel, Checkpoint};
use xabr::combined::{CombinedModel, LanguageModel};
use xabr::data::{collate, gen_synthetic, ByteTokenizer, TaskMix, VOCAB_SIZE};
use xabr::optim::TrainConfig;
use xabr::train::train;
use xabr::transformer::StackConfig;
use xabr::Tape;

fn stack(d_model: usize) -> StackConfig {
    StackConfig {
        n_layers: 1,
        d_model,
        n_heads: 2,
        d_ff: 2 * d_model,
        vocab_size: VOCAB_SIZE,
        max_len: 96,
    }
}

fn logits(model: &AnyModel) -> xabr::Result<Vec<f32>> {
    let batch = collate(&gen_synthetic(2, 9, TaskMix::default())?, &ByteTokenizer)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.seq_batch())?;
    Ok(tape.value(out.logits).to_vec())
}

fn main() -> xabr::Result<()> {
    let mut model = CombinedModel::new(stack(16), stack(8), BridgeConfig::default_for(1, 8, 2), 0)?;
    let config = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr_bridge: 2e-3,
        lr_receiver: 1e-3,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &gen_synthetic(64, 1, TaskMix::default())?, &config)?;

    let path = std::env::temp_dir().join("xabr-example.xabr");
    let ckpt = Checkpoint {
        model: AnyModel::Combined(model),
        state: Some(report.state),
        train: Some(config),
    };
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!(
        "{} bytes written; logits identical after reload: {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        logits(&ckpt.model)? == logits(&back.model)?
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
