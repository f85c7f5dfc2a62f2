use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use semspeech::corpus::Split;
use semspeech::fusion::Variant;
use semspeech::tasks::Task;
use semspeech_cli::{LoadedConfig, Pipeline};

#[derive(Parser)]
#[command(name = "semspeech", version, about = "Semantic augmentation of frozen speech embeddings on a synthetic language")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunSelect {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    task: Option<Task>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic language and corpus.
    GenCorpus(Common),
    /// Denoising pretraining of the language model on unpaired text.
    TrainLm(Common),
    /// Adversarial training of the bridge generator.
    TrainBridge(Common),
    /// Train a task head on top of a fusion variant.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: RunSelect,
    },
    /// Score a finetuned run on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: RunSelect,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Finetune every configured variant and seed and tabulate the results.
    Ablate(Common),
    /// Decode phoneme lattices into subwords and report error rates.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dev")]
        split: Split,
        /// Use gold one-hot lattices instead of the trained generator.
        #[arg(long)]
        oracle: bool,
    },
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    let mut loaded = LoadedConfig::load(common.config.as_deref())?;
    if let Some(o) = &common.output {
        loaded.config.output = o.clone();
    }
    if let Some(s) = common.seed {
        loaded.config.seed = s;
    }
    Pipeline::new(loaded)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => println!("{}", pipeline(&c)?.gen_corpus()?.display()),
        Command::TrainLm(c) => println!("{}", pipeline(&c)?.train_lm()?.display()),
        Command::TrainBridge(c) => println!("{}", pipeline(&c)?.train_bridge()?.display()),
        Command::Finetune { common, select } => {
            let p = pipeline(&common)?;
            let variant = select.variant.unwrap_or(p.cfg.fusion.variant);
            let task = select.task.unwrap_or(p.cfg.task.task);
            let run = p.finetune(variant, task, p.cfg.seed)?;
            eprintln!("{}", run.dir.display());
            print_json(&run.report.metrics)?;
        }
        Command::Eval { common, select, split } => {
            let p = pipeline(&common)?;
            let variant = select.variant.unwrap_or(p.cfg.fusion.variant);
            let task = select.task.unwrap_or(p.cfg.task.task);
            print_json(&p.eval(variant, task, p.cfg.seed, split)?.metrics)?;
        }
        Command::Ablate(c) => {
            let a = pipeline(&c)?.ablate()?;
            eprintln!("{}", a.dir.display());
            print!("{}", semspeech_cli::stats::to_csv(&a.rows));
        }
        Command::Decode { common, split, oracle } => {
            let s = pipeline(&common)?.decode(split, oracle)?;
            println!("WER {:.4} PER {:.4} ({} utterances, {} without a lexicon path)", s.wer, s.per, s.utterances, s.no_path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
