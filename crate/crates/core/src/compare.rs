//! Side-by-side training and evaluation of the model variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::combined::{generate, CombinedModel, GenerationParams, LanguageModel};
use crate::data::{ByteTokenizer, Example, Task, EOS};
use crate::error::{Error, Result};
use crate::optim::{EpochRecord, TrainConfig};
use crate::train::{evaluate, train_split};
use crate::transformer::{StackConfig, TransformerStack};

pub const SAMPLE_QUERIES: [&str; 2] = ["sum of 5 and 5", "find the remainder by dividing 7 by 4"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The pretrained donor as is, frozen.
    DonorOnly,
    /// A fresh receiver trained on the task corpus alone.
    ReceiverScratch,
    /// A receiver warm-started on the pretraining corpus, then trained on the task corpus.
    ReceiverFinetuned,
    /// Frozen donor, bridges and a fresh receiver trained together.
    Combined,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DonorOnly,
        Variant::ReceiverScratch,
        Variant::ReceiverFinetuned,
        Variant::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DonorOnly => "donor-only",
            Variant::ReceiverScratch => "receiver-scratch",
            Variant::ReceiverFinetuned => "receiver-finetuned",
            Variant::Combined => "combined",
        }
    }
}

/// Corpus and settings for warm-starting the fine-tuned receiver.
#[derive(Clone, Debug)]
pub struct Pretraining<'a> {
    pub corpus: &'a [Example],
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct CompareSetup<'a> {
    pub donor: &'a TransformerStack,
    pub receiver: StackConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub train_set: &'a [Example],
    pub val_set: &'a [Example],
    /// Needed by [`Variant::ReceiverFinetuned`].
    pub pretraining: Option<Pretraining<'a>>,
    /// Queries scored by exact final answer, if any.
    pub accuracy_tasks: &'a [Task],
    /// Seed for fresh receivers and bridges.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub val_loss: f32,
    pub perplexity: f32,
    pub steps: u64,
    pub initial_loss: Option<f32>,
    pub history: Vec<EpochRecord>,
    pub accuracy: Option<f32>,
    pub trainable_params: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub train_examples: usize,
    pub val_examples: usize,
    pub rows: Vec<VariantResult>,
}

impl ComparisonReport {
    pub fn row(&self, variant: Variant) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Trained on {} examples, validated on {}.\n",
            self.train_examples, self.val_examples
        );
        s.push_str("| variant | val loss | perplexity | steps | answer accuracy | trainable params |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let acc = r
                .accuracy
                .map_or_else(|| "-".to_owned(), |a| format!("{:.1}%", a * 100.0));
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.3} | {} | {} | {} |",
                r.variant.name(),
                r.val_loss,
                r.perplexity,
                r.steps,
                acc,
                r.trainable_params
            );
        }
        s.push_str("\n## Sample generations\n\n| variant | prompt | output |\n|---|---|---|\n");
        for r in &self.rows {
            for smp in &r.samples {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} |",
                    r.variant.name(),
                    escape(&smp.prompt),
                    escape(&smp.output)
                );
            }
        }
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', "\\n")
}

/// Greedy completion of `prompt` as text, stopping at EOS.
pub fn complete<M: LanguageModel + ?Sized>(model: &M, prompt: &str, max_new: usize) -> Result<String> {
    let tok = ByteTokenizer;
    let ids = tok.prompt_ids(prompt);
    let out = generate(model, &ids, &GenerationParams::greedy(max_new, EOS))?;
    let body: Vec<usize> = out.into_iter().filter(|&t| t != EOS).collect();
    Ok(tok.detokenize_lossy(&body))
}

/// Fraction of `tasks` whose greedy completion states the right final answer.
pub fn answer_accuracy<M: LanguageModel + ?Sized>(model: &M, tasks: &[Task]) -> Result<f32> {
    if tasks.is_empty() {
        return Err(Error::Contract("accuracy needs at least one task".into()));
    }
    let mut correct = 0;
    for task in tasks {
        let budget = task.response().len() + 8;
        let text = complete(model, &task.prompt(), budget)?;
        if task.parse_answer(&text) == Some(task.answer()) {
            correct += 1;
        }
    }
    Ok(correct as f32 / tasks.len() as f32)
}

fn finish<M: LanguageModel + ?Sized>(
    variant: Variant,
    model: &M,
    setup: &CompareSetup,
    steps: u64,
    initial_loss: Option<f32>,
    history: Vec<EpochRecord>,
) -> Result<VariantResult> {
    let eval = evaluate(model, setup.val_set, setup.train.batch_size)?;
    let accuracy = if setup.accuracy_tasks.is_empty() {
        None
    } else {
        Some(answer_accuracy(model, setup.accuracy_tasks)?)
    };
    let samples = SAMPLE_QUERIES
        .iter()
        .map(|q| {
            Ok(Sample {
                prompt: (*q).to_owned(),
                output: complete(model, q, 48)?,
            })
        })
        .collect::<Result<_>>()?;
    log::info!(
        "{}: val loss {:.4}, {} steps",
        variant.name(),
        eval.loss,
        steps
    );
    Ok(VariantResult {
        variant,
        val_loss: eval.loss,
        perplexity: eval.perplexity,
        steps,
        initial_loss,
        history,
        accuracy,
        trainable_params: model.trainable_count(),
        samples,
    })
}

fn train_variant<M: LanguageModel>(
    variant: Variant,
    mut model: M,
    setup: &CompareSetup,
) -> Result<VariantResult> {
    let report = train_split(&mut model, setup.train_set, setup.val_set, &setup.train)?;
    finish(
        variant,
        &model,
        setup,
        report.state.step,
        Some(report.initial_loss),
        report.state.history,
    )
}

/// Trains and evaluates each requested variant on the same split with the
/// same trainer settings. One row per variant, in request order.
pub fn compare_models(setup: &CompareSetup, variants: &[Variant]) -> Result<ComparisonReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        log::info!("variant {}", variant.name());
        let row = match variant {
            Variant::DonorOnly => finish(variant, setup.donor, setup, 0, None, Vec::new())?,
            Variant::ReceiverScratch => {
                let receiver = TransformerStack::new(setup.receiver.clone(), setup.seed)?;
                train_variant(variant, receiver, setup)?
            }
            Variant::ReceiverFinetuned => {
                let pre = setup.pretraining.as_ref().ok_or_else(|| {
                    Error::Contract("receiver-finetuned needs a pretraining corpus".into())
                })?;
                let mut receiver = TransformerStack::new(setup.receiver.clone(), setup.seed)?;
                crate::train::train(&mut receiver, pre.corpus, &pre.config)?;
                train_variant(variant, receiver, setup)?
            }
            Variant::Combined => {
                let receiver = TransformerStack::new(setup.receiver.clone(), setup.seed)?;
                let model = CombinedModel::from_parts(
                    setup.donor.clone(),
                    receiver,
                    setup.bridge.clone(),
                    setup.seed.wrapping_add(1),
                )?;
                train_variant(variant, model, setup)?
            }
        };
        rows.push(row);
    }
    Ok(ComparisonReport {
        train_examples: setup.train_set.len(),
        val_examples: setup.val_set.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, gen_tasks, TaskMix, VOCAB_SIZE};

    fn stack(max_len: usize) -> StackConfig {
        StackConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: VOCAB_SIZE,
            max_len,
        }
    }

    #[test]
    fn one_row_per_variant_with_samples() {
        let donor = TransformerStack::new(stack(96), 1).unwrap();
        let data = gen_synthetic(12, 3, TaskMix::default()).unwrap();
        let tasks = gen_tasks(2, 4, TaskMix::SUM_ONLY);
        let setup = CompareSetup {
            donor: &donor,
            receiver: stack(96),
            bridge: BridgeConfig::default_for(1, 8, 2),
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            },
            train_set: &data[..8],
            val_set: &data[8..],
            pretraining: Some(Pretraining {
                corpus: &data,
                config: TrainConfig {
                    epochs: 1,
                    batch_size: 4,
                    ..TrainConfig::default()
                },
            }),
            accuracy_tasks: &tasks,
            seed: 9,
        };
        let report = compare_models(&setup, &Variant::ALL).unwrap();
        assert_eq!(report.rows.len(), 4);
        for (row, v) in report.rows.iter().zip(Variant::ALL) {
            assert_eq!(row.variant, v);
            let prompts: Vec<_> = row.samples.iter().map(|s| s.prompt.as_str()).collect();
            assert_eq!(prompts, SAMPLE_QUERIES);
        }
        assert_eq!(report.row(Variant::DonorOnly).unwrap().steps, 0);
        let steps = report.row(Variant::Combined).unwrap().steps;
        assert_eq!(report.row(Variant::ReceiverScratch).unwrap().steps, steps);
        let md = report.to_markdown();
        assert!(md.contains("| combined |"));
        let back: ComparisonReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back.rows.len(), 4);
    }

    #[test]
    fn finetuned_variant_needs_pretraining() {
        let donor = TransformerStack::new(stack(96), 1).unwrap();
        let data = gen_synthetic(4, 3, TaskMix::default()).unwrap();
        let setup = CompareSetup {
            donor: &donor,
            receiver: stack(96),
            bridge: BridgeConfig::default_for(1, 8, 2),
            train: TrainConfig::default(),
            train_set: &data[..2],
            val_set: &data[2..],
            pretraining: None,
            accuracy_tasks: &[],
            seed: 0,
        };
        let err = compare_models(&setup, &[Variant::ReceiverFinetuned]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
