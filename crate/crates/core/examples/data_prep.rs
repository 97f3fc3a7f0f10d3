//! Generate a synthetic arithmetic corpus, filter it by length, split it and
//! collate a padded batch.

use xabr::data::{collate, filter_by_length, gen_synthetic, split_train_val, ByteTokenizer, TaskMix};

fn main() -> xabr::Result<()> {
    let corpus = gen_synthetic(200, 7, TaskMix::default())?;
    for ex in corpus.iter().take(3) {
        println!("{:?} -> {:?} ({} tokens)", ex.prompt, ex.response, ex.token_len());
    }

    let filtered = filter_by_length(&corpus, 64)?;
    println!("kept {} of {}, dropped {}", filtered.kept.len(), corpus.len(), filtered.dropped);

    let (train, val) = split_train_val(&filtered.kept, 0.1, 1)?;
    println!("train {} / val {}", train.len(), val.len());

    let batch = collate(&train[..4], &ByteTokenizer)?;
    println!(
        "batch {}x{}, {} scored targets",
        batch.batch,
        batch.len,
        batch.target_count()
    );
    Ok(())
}
