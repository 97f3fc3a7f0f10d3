//! Corpus handling: byte tokenizer, JSONL ingestion, length filtering,
//! seeded splits, dynamic-padding collation and the synthetic arithmetic
//! task generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::SeqBatch;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;
/// Inserted between prompt and response.
pub const SEPARATOR: &[u8] = b"\n#";
pub const IGNORE: i64 = -1;

/// Raw bytes plus BOS, EOS and PAD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// `BOS + bytes + EOS`.
    pub fn tokenize(&self, bytes: &[u8]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(bytes.len() + 2);
        ids.push(BOS);
        ids.extend(bytes.iter().map(|&b| usize::from(b)));
        ids.push(EOS);
        ids
    }

    /// Drops special tokens and returns the remaining bytes.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    pub fn detokenize_lossy(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.detokenize(ids)).into_owned()
    }

    /// `BOS + prompt + SEPARATOR`, the context a response is generated from.
    pub fn prompt_ids(&self, prompt: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(prompt.bytes().map(usize::from));
        ids.extend(SEPARATOR.iter().map(|&b| usize::from(b)));
        ids
    }

    /// Full training sequence and the length of its prompt part.
    pub fn example_ids(&self, ex: &Example) -> (Vec<usize>, usize) {
        let mut ids = self.prompt_ids(&ex.prompt);
        let prompt_len = ids.len();
        ids.extend(ex.response.bytes().map(usize::from));
        ids.push(EOS);
        (ids, prompt_len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub response: String,
}

impl Example {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Result<Self> {
        let (prompt, response) = (prompt.into(), response.into());
        if prompt.trim().is_empty() || response.trim().is_empty() {
            return Err(Error::Data(
                "example prompt and response must be non-empty".into(),
            ));
        }
        Ok(Example { prompt, response })
    }

    /// Tokens in `BOS + prompt + SEPARATOR + response + EOS`.
    pub fn token_len(&self) -> usize {
        self.prompt.len() + SEPARATOR.len() + self.response.len() + 2
    }
}

/// Reads one `{"prompt": ..., "response": ...}` object per line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let field = |name: &str| {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .ok_or_else(|| Error::Schema {
                    line: line_no,
                    field: name.to_owned(),
                })
        };
        let (prompt, response) = (field("prompt")?, field("response")?);
        let ex = Example::new(prompt, response)
            .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub kept: Vec<Example>,
    pub dropped: usize,
}

/// Keeps examples whose full token sequence fits in `max_tokens`.
pub fn filter_by_length(examples: &[Example], max_tokens: usize) -> Result<Filtered> {
    if max_tokens < 2 {
        return Err(Error::Contract(format!(
            "max_tokens must be at least 2, got {max_tokens}"
        )));
    }
    let kept: Vec<Example> = examples
        .iter()
        .filter(|ex| ex.token_len() <= max_tokens)
        .cloned()
        .collect();
    let dropped = examples.len() - kept.len();
    if dropped > 0 {
        log::info!("dropped {dropped} examples longer than {max_tokens} tokens");
    }
    Ok(Filtered { kept, dropped })
}

/// Seeded shuffle, then the first `⌈N·val_fraction⌉` examples become validation.
pub fn split_train_val(
    examples: &[Example],
    val_fraction: f32,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if examples.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 examples to split, got {}",
            examples.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = examples.len();
    // tolerance absorbs the f32 representation error of fractions like 0.1
    let n_val = ((n as f64 * f64::from(val_fraction)) - 1e-6).ceil() as usize;
    let n_val = n_val.clamp(1, n - 1);
    let mut shuffled = examples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = shuffled.split_off(n_val);
    Ok((train, shuffled))
}

/// A dynamically padded batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    /// Next-token targets; [`IGNORE`] on prompt and padding positions.
    pub labels: Vec<i64>,
}

impl TokenBatch {
    pub fn seq_batch(&self) -> SeqBatch {
        SeqBatch {
            batch: self.batch,
            len: self.len,
            ids: self.ids.clone(),
            pad: self.pad_mask.clone(),
        }
    }

    pub fn target_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Appends `extra` PAD columns to every row.
    pub fn with_extra_padding(&self, extra: usize) -> TokenBatch {
        let len = self.len + extra;
        let mut out = TokenBatch {
            batch: self.batch,
            len,
            ids: Vec::with_capacity(self.batch * len),
            pad_mask: Vec::with_capacity(self.batch * len),
            labels: Vec::with_capacity(self.batch * len),
        };
        for b in 0..self.batch {
            let row = b * self.len..(b + 1) * self.len;
            out.ids.extend_from_slice(&self.ids[row.clone()]);
            out.ids.extend(std::iter::repeat(PAD).take(extra));
            out.pad_mask.extend_from_slice(&self.pad_mask[row.clone()]);
            out.pad_mask.extend(std::iter::repeat(true).take(extra));
            out.labels.extend_from_slice(&self.labels[row]);
            out.labels.extend(std::iter::repeat(IGNORE).take(extra));
        }
        out
    }
}

/// Right-pads `(ids, prompt_len)` sequences to the longest one. Only
/// positions predicting a token at or after `prompt_len` carry a label.
pub fn collate_sequences(seqs: &[(Vec<usize>, usize)]) -> Result<TokenBatch> {
    if seqs.is_empty() {
        return Err(Error::Contract("cannot collate an empty batch".into()));
    }
    let len = seqs.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::Contract("cannot collate empty sequences".into()));
    }
    let batch = seqs.len();
    let mut out = TokenBatch {
        batch,
        len,
        ids: Vec::with_capacity(batch * len),
        pad_mask: Vec::with_capacity(batch * len),
        labels: Vec::with_capacity(batch * len),
    };
    for (ids, prompt_len) in seqs {
        for t in 0..len {
            let real = t < ids.len();
            out.ids.push(if real { ids[t] } else { PAD });
            out.pad_mask.push(!real);
            let target = t + 1;
            out.labels.push(if target < ids.len() && target >= *prompt_len {
                ids[target] as i64
            } else {
                IGNORE
            });
        }
    }
    Ok(out)
}

/// Tokenizes `prompt + SEPARATOR + response` per example and pads the batch.
pub fn collate(examples: &[Example], tokenizer: &ByteTokenizer) -> Result<TokenBatch> {
    let seqs: Vec<_> = examples.iter().map(|ex| tokenizer.example_ids(ex)).collect();
    collate_sequences(&seqs)
}

/// One synthetic arithmetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Sum(u32, u32),
    Rem(u32, u32),
}

impl Task {
    pub fn prompt(&self) -> String {
        match *self {
            Task::Sum(a, b) => format!("sum of {a} and {b}"),
            Task::Rem(a, b) => format!("find the remainder by dividing {a} by {b}"),
        }
    }

    pub fn answer(&self) -> u32 {
        match *self {
            Task::Sum(a, b) => a + b,
            Task::Rem(a, b) => a % b,
        }
    }

    /// Worked response ending in the final answer.
    pub fn response(&self) -> String {
        match *self {
            Task::Sum(a, b) => {
                let c = a + b;
                format!("{a} + {b} = {c}. The answer is {c}.")
            }
            Task::Rem(a, b) => {
                let (q, r) = (a / b, a % b);
                format!("{a} = {q}*{b} + {r}. The remainder is {r}.")
            }
        }
    }

    pub fn example(&self) -> Example {
        Example {
            prompt: self.prompt(),
            response: self.response(),
        }
    }

    /// Pulls the final answer out of a generated response.
    pub fn parse_answer(&self, generated: &str) -> Option<u32> {
        let marker = match self {
            Task::Sum(..) => "The answer is ",
            Task::Rem(..) => "The remainder is ",
        };
        let tail = &generated[generated.find(marker)? + marker.len()..];
        let digits: String = tail.chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    }
}

/// Relative frequency of each task family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub sum: f32,
    pub rem: f32,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { sum: 1.0, rem: 1.0 }
    }
}

impl TaskMix {
    pub const SUM_ONLY: TaskMix = TaskMix { sum: 1.0, rem: 0.0 };
    pub const REM_ONLY: TaskMix = TaskMix { sum: 0.0, rem: 1.0 };

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Task {
        let total = self.sum + self.rem;
        let pick_sum = total <= 0.0 || rng.gen::<f32>() * total < self.sum;
        if pick_sum {
            Task::Sum(rng.gen_range(0..=99), rng.gen_range(0..=99))
        } else {
            Task::Rem(rng.gen_range(0..=99), rng.gen_range(2..=9))
        }
    }
}

/// Seeded task draws.
pub fn gen_tasks(n: usize, seed: u64, mix: TaskMix) -> Vec<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| mix.sample(&mut rng)).collect()
}

pub fn gen_synthetic(n: usize, seed: u64, mix: TaskMix) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Contract("gen_synthetic needs n >= 1".into()));
    }
    Ok(gen_tasks(n, seed, mix).iter().map(Task::example).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(p: &str, r: &str) -> Example {
        Example::new(p, r).unwrap()
    }

    #[test]
    fn tokenize_specials() {
        let tok = ByteTokenizer;
        assert_eq!(tok.tokenize(b""), vec![BOS, EOS]);
        assert_eq!(tok.tokenize(b"A"), vec![256, 65, 257]);
        assert_eq!(tok.detokenize(&[BOS, 104, 105, EOS, PAD]), b"hi");
        assert_eq!(tok.vocab_size(), 259);
    }

    #[test]
    fn jsonl_parsing() {
        let two = "{\"prompt\":\"a\",\"response\":\"b\"}\n\n{\"prompt\":\"c\",\"response\":\"d\",\"x\":1}\n";
        assert_eq!(parse_jsonl(two).unwrap(), vec![ex("a", "b"), ex("c", "d")]);
        assert!(parse_jsonl("").unwrap().is_empty());
        match parse_jsonl("{\"prompt\": \"x\"}") {
            Err(Error::Schema { line: 1, field }) => assert_eq!(field, "response"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_jsonl("{\"prompt\":\"a\",\"response\":\"b\"}\n{oops"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn length_filter_boundaries() {
        // BOS a \n # b EOS
        let e = ex("a", "b");
        assert_eq!(e.token_len(), 6);
        assert_eq!(filter_by_length(&[e.clone()], 5).unwrap().dropped, 1);
        let kept = filter_by_length(&[e.clone()], 6).unwrap();
        assert_eq!((kept.kept.len(), kept.dropped), (1, 0));
        assert!(filter_by_length(&[e], 1).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let all: Vec<_> = (0..10).map(|i| ex(&format!("p{i}"), "r")).collect();
        let (train, val) = split_train_val(&all, 0.1, 42).unwrap();
        assert_eq!((train.len(), val.len()), (9, 1));
        assert_eq!(split_train_val(&all, 0.1, 42).unwrap(), (train, val));
        assert!(split_train_val(&all[..1], 0.5, 0).is_err());
        assert!(split_train_val(&all, 0.0, 0).is_err());
    }

    #[test]
    fn collate_padding() {
        let b = collate_sequences(&[(vec![BOS, 1, EOS], 1), (vec![BOS, 1, 2, 3, EOS], 1)]).unwrap();
        assert_eq!((b.batch, b.len), (2, 5));
        assert_eq!(b.pad_mask[..5].iter().filter(|&&p| p).count(), 2);
        assert_eq!(&b.ids[3..5], &[PAD, PAD]);
        assert_eq!(&b.labels[..5], &[1, EOS as i64, -1, -1, -1]);

        let one = collate(&[ex("hi", "yo")], &ByteTokenizer).unwrap();
        assert!(one.pad_mask.iter().all(|&p| !p));
        // BOS h i \n # y o EOS: labels start at the last separator byte
        assert_eq!(one.labels, vec![-1, -1, -1, -1, 121, 111, EOS as i64, -1]);
    }

    #[test]
    fn synthetic_tasks() {
        let sum = Task::Sum(5, 5).example();
        assert_eq!(sum.prompt, "sum of 5 and 5");
        assert!(sum.response.contains("10"));
        let rem = Task::Rem(7, 4).example();
        assert_eq!(rem.prompt, "find the remainder by dividing 7 by 4");
        assert_eq!(rem.response, "7 = 1*4 + 3. The remainder is 3.");
        assert_eq!(Task::Sum(5, 5).parse_answer(&sum.response), Some(10));
        assert_eq!(Task::Rem(7, 4).parse_answer("garbage"), None);

        let a = gen_synthetic(50, 7, TaskMix::default()).unwrap();
        assert_eq!(a, gen_synthetic(50, 7, TaskMix::default()).unwrap());
        assert_ne!(a, gen_synthetic(50, 8, TaskMix::default()).unwrap());
        assert!(gen_tasks(20, 1, TaskMix::SUM_ONLY)
            .iter()
            .all(|t| matches!(t, Task::Sum(..))));
        assert!(gen_synthetic(0, 1, TaskMix::default()).is_err());
    }
}
