//! Compare the four model variants on a small arithmetic corpus and print the
//! markdown report. Sizes are kept small so this finishes in about a minute;
//! the `compare` subcommand runs the same harness from a config file.
//!
//! cargo run --release --example compare

use xabr::bridge::BridgeConfig;
use xabr::compare::{compare_models, CompareSetup, Pretraining, Variant};
use xabr::data::{gen_synthetic, gen_tasks, split_train_val, TaskMix, VOCAB_SIZE};
use xabr::optim::TrainConfig;
use xabr::train::train;
use xabr::transformer::{StackConfig, TransformerStack};

fn stack(n_layers: usize, d_model: usize) -> StackConfig {
    StackConfig {
        n_layers,
        d_model,
        n_heads: 4,
        d_ff: 4 * d_model,
        vocab_size: VOCAB_SIZE,
        max_len: 80,
    }
}

fn main() -> xabr::Result<()> {
    let pretrain_corpus = gen_synthetic(2000, 1, TaskMix::default())?;
    let pretrain_config = TrainConfig {
        epochs: 2,
        batch_size: 32,
        lr_receiver: 2e-3,
        ..TrainConfig::default()
    };
    let mut donor = TransformerStack::new(stack(2, 48), 0)?;
    train(&mut donor, &pretrain_corpus, &pretrain_config)?;

    let fresh = gen_synthetic(256, 2, TaskMix::default())?;
    let (train_set, val_set) = split_train_val(&fresh, 0.1, 3)?;
    let tasks = gen_tasks(50, 99, TaskMix::SUM_ONLY);
    let setup = CompareSetup {
        donor: &donor,
        receiver: stack(2, 32),
        bridge: BridgeConfig::default_for(2, 32, 4),
        train: TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr_bridge: 4e-3,
            lr_receiver: 2e-3,
            ..TrainConfig::default()
        },
        train_set: &train_set,
        val_set: &val_set,
        pretraining: Some(Pretraining {
            corpus: &pretrain_corpus,
            config: pretrain_config.clone(),
        }),
        accuracy_tasks: &tasks,
        seed: 5,
    };
    let report = compare_models(&setup, &Variant::ALL)?;
    println!("{}", report.to_markdown());
    Ok(())
}
