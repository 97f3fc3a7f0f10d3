//! The donor reads a longer window than the receiver: with a 96-token prompt
//! the receiver sees the last 64 positions while each bridge attends over all 96.

use xabr::bridge::BridgeConfig;
use xabr::combined::{generate, CombinedModel, GenerationParams};
use xabr::data::{ByteTokenizer, EOS, VOCAB_SIZE};
use xabr::transformer::{SeqBatch, StackConfig};
use xabr::Tape;

fn stack(d_model: usize, max_len: usize) -> StackConfig {
    StackConfig {
        n_layers: 2,
        d_model,
        n_heads: 2,
        d_ff: 4 * d_model,
        vocab_size: VOCAB_SIZE,
        max_len,
    }
}

fn main() -> xabr::Result<()> {
    let model = CombinedModel::new(stack(32, 128), stack(16, 64), BridgeConfig::default_for(2, 16, 2), 0)?;
    let text = "find the remainder by dividing 97 by 8, then add 12 and 30, and report every one of the intermediate steps";
    let mut prompt = ByteTokenizer.prompt_ids(text);
    prompt.truncate(96);

    let mut tape = Tape::new();
    let out = model.combined_forward(&mut tape, &SeqBatch::single(&prompt))?;
    println!("prompt tokens: {}, receiver window offset: {}", prompt.len(), out.offset);
    for (i, &a) in out.bridge_attention.iter().enumerate() {
        let probs = tape.attention_probs(a).expect("bridge attention");
        println!("bridge {i}: attention dims {:?}", probs.dims);
    }

    let generated = generate(&model, &prompt, &GenerationParams::greedy(8, EOS))?;
    println!("generated {:?}", ByteTokenizer.detokenize_lossy(&generated));
    Ok(())
}
