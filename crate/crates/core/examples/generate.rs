//! Sample from a model loaded from a checkpoint, or from a fresh stack when no
//! path is given.
//!
//! cargo run --example generate -- [model.xabr] ["sum of 5 and 5"]

use xabr::checkpoint::{AnyModel, Checkpoint};
use xabr::combined::{generate, GenerationParams};
use xabr::data::{ByteTokenizer, EOS, VOCAB_SIZE};
use xabr::transformer::{StackConfig, TransformerStack};

fn main() -> xabr::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) => Checkpoint::load(path)?.model,
        None => AnyModel::Stack(TransformerStack::new(
            StackConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                vocab_size: VOCAB_SIZE,
                max_len: 64,
            },
            0,
        )?),
    };
    let prompt = args.next().unwrap_or_else(|| "sum of 5 and 5".to_owned());
    let ids = ByteTokenizer.prompt_ids(&prompt);
    for (label, temperature) in [("greedy", 0.0), ("t=0.8", 0.8)] {
        let params = GenerationParams {
            max_new_tokens: 12,
            temperature,
            seed: 1,
            eos_id: EOS,
        };
        let out = generate(&model, &ids, &params)?;
        println!("{label:>6}: {:?}", ByteTokenizer.detokenize_lossy(&out));
    }
    Ok(())
}
