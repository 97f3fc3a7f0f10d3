use proptest::prelude::*;

use xabr::data::{
    collate, filter_by_length, split_train_val, ByteTokenizer, Example, BOS, EOS, IGNORE, PAD,
};
use xabr::{AttentionMask, Tape, Tensor};

fn example() -> impl Strategy<Value = Example> {
    ("[a-z0-9][a-z0-9 ]{0,11}", "[a-z0-9.][a-z0-9 .]{0,11}").prop_map(|(p, r)| Example::new(p, r).unwrap())
}

proptest! {
    #[test]
    fn tokenizer_round_trips_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let tok = ByteTokenizer;
        let ids = tok.tokenize(&bytes);
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        prop_assert!(ids[1..ids.len() - 1].iter().all(|&id| id < 256));
        prop_assert_eq!(tok.detokenize(&ids), bytes);
    }

    #[test]
    fn collate_labels_are_the_shifted_response(examples in proptest::collection::vec(example(), 1..6)) {
        let tok = ByteTokenizer;
        let batch = collate(&examples, &tok).unwrap();
        for (b, ex) in examples.iter().enumerate() {
            let (ids, prompt_len) = tok.example_ids(ex);
            prop_assert_eq!(ids[0], BOS);
            prop_assert_eq!(*ids.last().unwrap(), EOS);
            let row = &batch.labels[b * batch.len..(b + 1) * batch.len];
            let row_ids = &batch.ids[b * batch.len..(b + 1) * batch.len];
            for t in 0..batch.len {
                if t + 1 < ids.len() && t + 1 >= prompt_len {
                    prop_assert_eq!(row[t], ids[t + 1] as i64);
                } else {
                    prop_assert_eq!(row[t], IGNORE);
                }
                if t >= ids.len() {
                    prop_assert_eq!(row_ids[t], PAD);
                    prop_assert!(batch.pad_mask[b * batch.len + t]);
                }
            }
        }
    }

    #[test]
    fn length_filter_is_idempotent(examples in proptest::collection::vec(example(), 0..12), max in 2usize..40) {
        let once = filter_by_length(&examples, max).unwrap();
        let twice = filter_by_length(&once.kept, max).unwrap();
        prop_assert_eq!(&twice.kept, &once.kept);
        prop_assert_eq!(twice.dropped, 0);
        prop_assert_eq!(once.kept.len() + once.dropped, examples.len());
        prop_assert!(once.kept.iter().all(|ex| ex.token_len() <= max));
    }

    #[test]
    fn split_is_a_partition(n in 2usize..60, frac in 0.05f32..0.95, seed in any::<u64>()) {
        let examples: Vec<Example> = (0..n)
            .map(|i| Example::new(format!("p{i}"), "r").unwrap())
            .collect();
        let (train, val) = split_train_val(&examples, frac, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut all: Vec<String> = train.iter().chain(&val).map(|e| e.prompt.clone()).collect();
        all.sort();
        let mut expected: Vec<String> = examples.iter().map(|e| e.prompt.clone()).collect();
        expected.sort();
        prop_assert_eq!(all, expected);
        let again = split_train_val(&examples, frac, seed).unwrap();
        prop_assert_eq!(again.1, val);
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), offset in 0usize..4) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (3, 6);
        let mask = AttentionMask::aligned(1, n, m, offset);
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::randn(&[n, 4], 1.0, &mut rng));
        let k = tape.leaf(&Tensor::randn(&[m, 4], 1.0, &mut rng));
        let v = tape.leaf(&Tensor::randn(&[m, 4], 1.0, &mut rng));
        let out = tape.attention(q, k, v, 2, &mask).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        prop_assert_eq!(probs.dims, [1, 2, n, m]);
        for (r, row) in probs.probs.chunks(m).enumerate() {
            let i = r % n;
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            for (j, &p) in row.iter().enumerate() {
                if j > i + offset {
                    prop_assert!(p == 0.0);
                }
            }
        }
    }
}
