//! Pretrain a tiny donor briefly, bridge it into a receiver and drive the loss
//! on a fixed batch of 16 examples towards zero.
//!
//! cargo run --release --example overfit

use xabr::bridge::BridgeConfig;
use xabr::combined::{batch_loss, CombinedModel};
use xabr::data::{collate, gen_synthetic, ByteTokenizer, TaskMix, VOCAB_SIZE};
use xabr::optim::{TrainConfig, TrainState};
use xabr::train::train_step;
use xabr::transformer::{StackConfig, TransformerStack};

fn stack(seed: u64) -> xabr::Result<TransformerStack> {
    let cfg = StackConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 128,
        vocab_size: VOCAB_SIZE,
        max_len: 96,
    };
    TransformerStack::new(cfg, seed)
}

fn main() -> xabr::Result<()> {
    let mut donor = stack(1)?;
    let corpus = gen_synthetic(3200, 2, TaskMix::default())?;
    let config = TrainConfig {
        lr_receiver: 2e-3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&donor);
    for chunk in corpus.chunks(16).take(200) {
        train_step(&mut donor, &mut state, &config, &collate(chunk, &ByteTokenizer)?)?;
    }

    let mut model = CombinedModel::from_parts(donor, stack(3)?, BridgeConfig::default_for(2, 32, 4), 4)?;
    let batch = collate(&gen_synthetic(16, 5, TaskMix::default())?, &ByteTokenizer)?;
    let config = TrainConfig {
        lr_bridge: 6e-3,
        lr_receiver: 3e-3,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model);
    for step in 1..=500 {
        train_step(&mut model, &mut state, &config, &batch)?;
        let loss = batch_loss(&model, &batch)?;
        if step % 25 == 0 || loss < 0.1 {
            println!("step {step:3}  loss {loss:.4}");
        }
        if loss < 0.1 {
            break;
        }
    }
    Ok(())
}
