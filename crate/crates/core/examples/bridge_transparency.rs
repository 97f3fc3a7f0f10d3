//! A freshly initialised combined model computes exactly what its receiver
//! computes alone: the bridge output projections start at zero.

use xabr::bridge::BridgeConfig;
use xabr::combined::CombinedModel;
use xabr::data::{collate, gen_synthetic, ByteTokenizer, TaskMix, VOCAB_SIZE};
use xabr::transformer::StackConfig;
use xabr::Tape;

fn stack(n_layers: usize, d_model: usize) -> StackConfig {
    StackConfig {
        n_layers,
        d_model,
        n_heads: 2,
        d_ff: 4 * d_model,
        vocab_size: VOCAB_SIZE,
        max_len: 96,
    }
}

fn main() -> xabr::Result<()> {
    let model = CombinedModel::new(stack(2, 32), stack(2, 16), BridgeConfig::default_for(2, 16, 2), 0)?;
    let data = gen_synthetic(4, 1, TaskMix::default())?;
    let batch = collate(&data, &ByteTokenizer)?.seq_batch();

    let mut tape = Tape::new();
    let both = model.combined_forward(&mut tape, &batch)?;
    let alone = model.receiver_only_forward(&mut tape, &batch)?;
    let diff = tape
        .value(both.logits)
        .iter()
        .zip(tape.value(alone.logits))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max |combined - receiver| = {diff:e}");
    println!("trainable parameters: {}", xabr::combined::LanguageModel::trainable_count(&model));
    Ok(())
}
