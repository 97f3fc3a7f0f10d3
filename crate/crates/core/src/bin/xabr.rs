use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xabr::checkpoint::{AnyModel, Checkpoint};
use xabr::combined::{generate, CombinedModel, GenerationParams};
use xabr::compare::{compare_models, CompareSetup, Pretraining, Variant};
use xabr::config::RunConfig;
use xabr::data::{gen_synthetic, load_jsonl, split_train_val, write_jsonl, ByteTokenizer, TaskMix, EOS};
use xabr::gradcheck::{self, CheckSettings};
use xabr::train::{evaluate, train};
use xabr::transformer::TransformerStack;
use xabr::{Error, Result};

#[derive(Parser)]
#[command(name = "xabr", version, about = "Cross-attention bridges between a frozen donor and a small receiver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mix {
    Sum,
    Rem,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic SUM/REM examples as JSONL.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mix: Mix,
    },
    /// Train the donor stack alone on a corpus.
    PretrainDonor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train bridges and receiver on top of a pretrained donor.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        donor_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss and perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Continue a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every model variant; write a markdown report and JSON sidecar.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        /// Pretrained donor; pretrained here on --pretrain-data when absent.
        #[arg(long)]
        donor_ckpt: Option<PathBuf>,
        /// Corpus for donor pretraining and the fine-tuned receiver's warm start.
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_parser = gradcheck::MODULES)]
        module: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_donor(path: &Path) -> Result<TransformerStack> {
    Checkpoint::load(path)?
        .model
        .into_stack()
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("{} holds a combined model, expected a donor stack", path.display()),
        })
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { n, seed, out, mix } => {
            let mix = match mix {
                Mix::Sum => TaskMix::SUM_ONLY,
                Mix::Rem => TaskMix::REM_ONLY,
                Mix::Both => TaskMix::default(),
            };
            write_jsonl(&out, &gen_synthetic(n, seed, mix)?)?;
            log::info!("wrote {n} examples to {}", out.display());
        }
        Command::PretrainDonor { config, data, out } => {
            let cfg = RunConfig::load(config)?;
            let corpus = load_jsonl(data)?;
            let mut donor = TransformerStack::new(cfg.donor(), cfg.train.seed)?;
            let report = train(&mut donor, &corpus, &cfg.train)?;
            let ckpt = Checkpoint {
                model: AnyModel::Stack(donor),
                state: Some(report.state),
                train: Some(cfg.train),
            };
            ckpt.save(&out)?;
            log::info!("saved donor to {}", out.display());
        }
        Command::Train { config, data, donor_ckpt, out } => {
            let cfg = RunConfig::load(config)?;
            let corpus = load_jsonl(data)?;
            let donor = load_donor(&donor_ckpt)?;
            if donor.config() != &cfg.donor() {
                return Err(Error::Config(format!(
                    "donor checkpoint config {:?} differs from the config file's donor section",
                    donor.config()
                )));
            }
            let seed = cfg.train.seed;
            let receiver = TransformerStack::new(cfg.receiver(), seed)?;
            let mut model = CombinedModel::from_parts(donor, receiver, cfg.bridge.clone(), seed.wrapping_add(1))?;
            let report = train(&mut model, &corpus, &cfg.train)?;
            if let Some(last) = report.history().last() {
                println!("final epoch {}: train {:.4} val {:.4}", last.epoch, last.train_loss, last.val_loss);
            }
            Checkpoint {
                model: AnyModel::Combined(model),
                state: Some(report.state),
                train: Some(cfg.train),
            }
            .save(&out)?;
            log::info!("saved combined model to {}", out.display());
        }
        Command::Eval { ckpt, data, batch_size } => {
            let model = Checkpoint::load(ckpt)?.model;
            let corpus = load_jsonl(data)?;
            let report = evaluate(&model, &corpus, batch_size)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Generate { ckpt, prompt, max_new, temperature, seed } => {
            let model = Checkpoint::load(ckpt)?.model;
            let tok = ByteTokenizer;
            let params = GenerationParams { max_new_tokens: max_new, temperature, seed, eos_id: EOS };
            let out = generate(&model, &tok.prompt_ids(&prompt), &params)?;
            let body: Vec<usize> = out.into_iter().filter(|&t| t != EOS).collect();
            println!("{}", tok.detokenize_lossy(&body));
        }
        Command::Compare { config, data, out_report, donor_ckpt, pretrain_data } => {
            let cfg = RunConfig::load(config)?;
            let corpus = load_jsonl(data)?;
            let pretrain_corpus = match &pretrain_data {
                Some(p) => load_jsonl(p)?,
                None => corpus.clone(),
            };
            let donor = match donor_ckpt {
                Some(p) => load_donor(&p)?,
                None => {
                    let mut d = TransformerStack::new(cfg.donor(), cfg.train.seed)?;
                    train(&mut d, &pretrain_corpus, &cfg.train)?;
                    d
                }
            };
            let kept = xabr::data::filter_by_length(&corpus, cfg.train.max_tokens.min(cfg.receiver.max_len).min(cfg.donor.max_len))?.kept;
            let (train_set, val_set) = split_train_val(&kept, cfg.train.val_fraction, cfg.train.seed)?;
            let setup = CompareSetup {
                donor: &donor,
                receiver: cfg.receiver(),
                bridge: cfg.bridge.clone(),
                train: cfg.train.clone(),
                train_set: &train_set,
                val_set: &val_set,
                pretraining: Some(Pretraining { corpus: &pretrain_corpus, config: cfg.train.clone() }),
                accuracy_tasks: &[],
                seed: cfg.train.seed,
            };
            let report = compare_models(&setup, &Variant::ALL)?;
            let md = report.to_markdown();
            std::fs::write(&out_report, &md).map_err(|e| Error::io(&out_report, e))?;
            let sidecar = out_report.with_extension("json");
            std::fs::write(&sidecar, report.to_json()).map_err(|e| Error::io(&sidecar, e))?;
            print!("{md}");
        }
        Command::Gradcheck { module } => {
            let reports = gradcheck::run(module.as_deref(), CheckSettings::default())?;
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
