//! Stage orchestration: corpus, language model, bridge, finetuning,
//! evaluation, ablation and lattice decoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use semspeech::bridge::model::generate;
use semspeech::bridge::train::{load_checkpoint, save_checkpoint, train_bridge, write_log};
use semspeech::bridge::{frame_error_rate, PhonemeLattice};
use semspeech::corpus::{build_language, generate_corpus, load_corpus, save_corpus, CorpusBundle, Split};
use semspeech::fusion::{assemble_model, AssembledModel, Components, FusionConfig, Variant};
use semspeech::lm::{add_adapters, pretrain_lm, Vocab};
use semspeech::numerics::ParamStore;
use semspeech::tasks::{evaluate, finetune, wer, EvalReport, Task};
use semspeech::wfst::{compile_lexicon, decode, Collapse};

use crate::config::{ExperimentConfig, LoadedConfig};
use crate::manifest::{self, RunManifest};
use crate::stats::{to_csv, AblationRow};

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
}

/// One finetuning run: which upstream artifacts it used and what it scored.
#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub dir: PathBuf,
    pub corpus_key: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub split: Split,
    pub oracle: bool,
    pub utterances: usize,
    pub per: f64,
    pub wer: f64,
    pub no_path: usize,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub dir: PathBuf,
    pub rows: Vec<AblationRow>,
}

#[derive(Serialize)]
struct FinetuneSettings<'a> {
    variant: Variant,
    task: Task,
    split: Split,
    seed: u64,
    heads: usize,
    adapter: &'a semspeech::lm::AdapterConfig,
    optimizer: &'a semspeech::tasks::FinetuneConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

impl Pipeline {
    /// Creates the output directory and echoes the config text into it.
    pub fn new(loaded: LoadedConfig) -> Result<Self> {
        let root = loaded.config.output.clone();
        fs::create_dir_all(&root).with_context(|| format!("creating output directory {}", root.display()))?;
        fs::write(root.join("config.toml"), &loaded.text).with_context(|| format!("writing into {}", root.display()))?;
        Ok(Self { cfg: loaded.config, root })
    }

    fn inputs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    pub fn corpus_key(&self) -> String {
        manifest::stage_key("corpus", &BTreeMap::new(), &self.cfg.corpus)
    }

    pub fn lm_key(&self) -> String {
        let inputs = Self::inputs(&[("corpus", &self.corpus_key())]);
        manifest::stage_key("lm", &inputs, &(&self.cfg.lm.pretrain, self.cfg.seed))
    }

    pub fn bridge_key(&self) -> String {
        let inputs = Self::inputs(&[("corpus", &self.corpus_key())]);
        manifest::stage_key("bridge", &inputs, &(&self.cfg.gan, self.cfg.seed))
    }

    fn upstream_inputs(&self, variant: Variant) -> BTreeMap<String, String> {
        let mut inputs = Self::inputs(&[("corpus", &self.corpus_key())]);
        if variant.uses_semantics() {
            inputs.insert("lm".into(), self.lm_key());
            inputs.insert("bridge".into(), self.bridge_key());
        }
        inputs
    }

    fn finetune_key(&self, variant: Variant, task: Task, seed: u64) -> String {
        let settings = FinetuneSettings {
            variant,
            task,
            split: self.cfg.task.split,
            seed,
            heads: self.cfg.fusion.heads,
            adapter: &self.cfg.lm.adapter,
            optimizer: &self.cfg.optimizer,
        };
        manifest::stage_key("finetune", &self.upstream_inputs(variant), &settings)
    }

    /// Runs `body` into a fresh stage directory unless a complete one exists.
    fn stage<S: Serialize>(
        &self,
        stage: &str,
        key: &str,
        inputs: BTreeMap<String, String>,
        settings: &S,
        seed: u64,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        let dir = manifest::stage_dir(&self.root, stage, key);
        if manifest::is_complete(&dir) {
            return Ok(dir);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing partial stage {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let start = Instant::now();
        write_json(&dir.join("settings.json"), settings)?;
        body(&dir).with_context(|| format!("stage {stage} failed"))?;
        let outputs = manifest::hash_tree(&dir)?;
        manifest::mark_complete(&dir)?;
        let entry = RunManifest {
            stage: stage.to_string(),
            key: key.to_string(),
            seed,
            inputs,
            outputs,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        manifest::append(&self.root, &entry)?;
        Ok(dir)
    }

    fn require(&self, stage: &str, key: &str, command: &str) -> Result<PathBuf> {
        let dir = manifest::stage_dir(&self.root, stage, key);
        if !manifest::is_complete(&dir) {
            bail!("{stage} checkpoint missing: run `semspeech {command}` with this config first (expected {})", dir.display());
        }
        Ok(dir)
    }

    pub fn gen_corpus(&self) -> Result<PathBuf> {
        let c = &self.cfg.corpus;
        self.stage("corpus", &self.corpus_key(), BTreeMap::new(), c, c.language_seed, |dir| {
            let spec = build_language(c.language_seed, c.sizes)?;
            let bundle = generate_corpus(&spec, c.counts, c.noise_std)?;
            save_corpus(&bundle, dir)?;
            Ok(())
        })
    }

    pub fn load_corpus(&self) -> Result<CorpusBundle> {
        let dir = self.require("corpus", &self.corpus_key(), "gen-corpus")?;
        Ok(load_corpus(&dir)?)
    }

    pub fn train_lm(&self) -> Result<PathBuf> {
        let corpus = self.load_corpus()?;
        let cfg = &self.cfg.lm.pretrain;
        let inputs = Self::inputs(&[("corpus", &self.corpus_key())]);
        self.stage("lm", &self.lm_key(), inputs, &(cfg, self.cfg.seed), self.cfg.seed, |dir| {
            let dev: Vec<Vec<usize>> = corpus.dev.iter().map(|u| u.subwords.clone()).collect();
            let run = pretrain_lm(&corpus.unpaired_text, &dev, corpus.spec.num_subwords(), cfg, self.cfg.seed)?;
            run.store.save(&dir.join("model"))?;
            write_json(&dir.join("log.json"), &serde_json::json!({
                "epochs": run.log,
                "unigram_dev_perplexity": run.unigram_dev_perplexity,
            }))?;
            Ok(())
        })
    }

    pub fn train_bridge(&self) -> Result<PathBuf> {
        let corpus = self.load_corpus()?;
        let cfg = &self.cfg.gan;
        let inputs = Self::inputs(&[("corpus", &self.corpus_key())]);
        self.stage("bridge", &self.bridge_key(), inputs, &(cfg, self.cfg.seed), self.cfg.seed, |dir| {
            let run = train_bridge(&corpus, cfg, self.cfg.seed)?;
            save_checkpoint(&run.state, cfg, &dir.join("checkpoint"))?;
            write_log(&run.log, &dir.join("log.jsonl"))?;
            write_json(&dir.join("summary.json"), &serde_json::json!({
                "dev_per": run.dev_per,
                "selected_restart": run.selected_restart,
                "restart_scores": run.restart_scores,
                "selected_step": run.selected_step,
            }))?;
            Ok(())
        })
    }

    /// Frozen upstream pieces for `variant`, loaded from the stage directories.
    pub fn components(&self, corpus: &CorpusBundle, variant: Variant, seed: u64) -> Result<Components> {
        let mut c = Components {
            feature_dim: corpus.spec.feature_dim(),
            generator: None,
            lexicon: None,
            collapse: Collapse::Repeats,
            lm: None,
        };
        if !variant.uses_semantics() {
            return Ok(c);
        }
        let lm_dir = self.require("lm", &self.lm_key(), "train-lm")?;
        let bridge_dir = self.require("bridge", &self.bridge_key(), "train-bridge")?;
        let ckpt = load_checkpoint(&bridge_dir.join("checkpoint"))?;
        let lcfg = self.cfg.lm.pretrain.model;
        let mut lm = ParamStore::load(&lm_dir.join("model"))?;
        if variant.uses_adapters() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA9_7E25);
            add_adapters(&mut lm, &lcfg, &self.cfg.lm.adapter, &mut rng)?;
        }
        c.generator = Some((ckpt.generator, ckpt.config.generator));
        c.lexicon = Some(compile_lexicon(&corpus.spec.lexicon, corpus.spec.num_phonemes(), None)?);
        c.lm = Some((lm, lcfg, Vocab { subwords: corpus.spec.num_subwords() }));
        Ok(c)
    }

    fn assemble(&self, corpus: &CorpusBundle, variant: Variant, seed: u64) -> Result<AssembledModel> {
        let components = self.components(corpus, variant, seed)?;
        let cfg = FusionConfig { variant, heads: self.cfg.fusion.heads };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF05E_0000);
        Ok(assemble_model(&cfg, components, &mut rng)?)
    }

    /// Finetunes `variant` on `task`, reusing a finished run when present.
    pub fn finetune(&self, variant: Variant, task: Task, seed: u64) -> Result<FinetuneRun> {
        let corpus = self.load_corpus()?;
        let key = self.finetune_key(variant, task, seed);
        let settings = FinetuneSettings {
            variant,
            task,
            split: self.cfg.task.split,
            seed,
            heads: self.cfg.fusion.heads,
            adapter: &self.cfg.lm.adapter,
            optimizer: &self.cfg.optimizer,
        };
        let dir = manifest::stage_dir(&self.root, "finetune", &key);
        if !manifest::is_complete(&dir) {
            // Fail on missing prerequisites before creating anything.
            self.components(&corpus, variant, seed)?;
        }
        let dir = self.stage("finetune", &key, self.upstream_inputs(variant), &settings, seed, |dir| {
            let mut model = self.assemble(&corpus, variant, seed)?;
            let report = finetune(&mut model, task, &corpus, &self.cfg.optimizer, self.cfg.task.split, seed)?;
            model.store.save(&dir.join("model"))?;
            write_json(&dir.join("report.json"), &report)?;
            Ok(())
        })?;
        Ok(FinetuneRun { corpus_key: self.corpus_key(), report: read_json(&dir.join("report.json"))?, dir })
    }

    /// Re-scores a finished finetuning run on `split`.
    pub fn eval(&self, variant: Variant, task: Task, seed: u64, split: Split) -> Result<EvalReport> {
        let corpus = self.load_corpus()?;
        let dir = self.require("finetune", &self.finetune_key(variant, task, seed), "finetune")?;
        let mut model = self.assemble(&corpus, variant, seed)?;
        model.store = ParamStore::load(&dir.join("model"))?;
        model.apply_registry();
        let report = evaluate(&model, task, &corpus, split)?;
        write_json(&dir.join(format!("eval-{}.json", split.name())), &report)?;
        Ok(report)
    }

    /// Every configured variant and seed on the configured task, summarized
    /// as mean and sample standard deviation per metric.
    pub fn ablate(&self) -> Result<Ablation> {
        let task = self.cfg.task.task;
        let seeds = self.cfg.task.seeds.clone();
        if seeds.is_empty() || self.cfg.task.variants.is_empty() {
            bail!("ablation needs at least one seed and one variant");
        }
        let mut runs = Vec::new();
        for &variant in &self.cfg.task.variants {
            for &seed in &seeds {
                runs.push((variant, seed, self.finetune(variant, task, seed)?));
            }
        }
        if let Some((_, _, first)) = runs.first() {
            if let Some((v, s, bad)) = runs.iter().find(|(_, _, r)| r.corpus_key != first.corpus_key) {
                bail!("corpus hash mismatch: {v} seed {s} used {} but {} was expected", bad.corpus_key, first.corpus_key);
            }
        }
        let mut rows = Vec::new();
        for &variant in &self.cfg.task.variants {
            let reports: Vec<&EvalReport> = runs.iter().filter(|(v, _, _)| *v == variant).map(|(_, _, r)| &r.report).collect();
            for metric in reports[0].metrics.keys() {
                let values = reports.iter().map(|r| r.metrics.get(metric).copied().ok_or_else(|| anyhow!("missing metric {metric}"))).collect::<Result<Vec<_>>>()?;
                rows.push(AblationRow::new(variant, metric, seeds.clone(), values));
            }
        }
        let keys: BTreeMap<String, String> = runs.iter().map(|(v, s, r)| (format!("{v}/{s}"), r.dir.file_name().unwrap().to_string_lossy().into_owned())).collect();
        let key = manifest::stage_key("ablate", &keys, &task);
        let dir = self.stage("ablate", &key, keys.clone(), &task, self.cfg.seed, |dir| {
            fs::write(dir.join("ablation.csv"), to_csv(&rows))?;
            write_json(&dir.join("ablation.json"), &rows)?;
            Ok(())
        })?;
        Ok(Ablation { dir, rows })
    }

    /// Decodes `split` through the lexicon transducer, from either the
    /// trained generator or gold one-hot lattices.
    pub fn decode(&self, split: Split, oracle: bool) -> Result<DecodeSummary> {
        let corpus = self.load_corpus()?;
        let k = corpus.spec.num_phonemes();
        let lex = compile_lexicon(&corpus.spec.lexicon, k, None)?;
        let generator = if oracle {
            None
        } else {
            let dir = self.require("bridge", &self.bridge_key(), "train-bridge")?;
            let ckpt = load_checkpoint(&dir.join("checkpoint"))?;
            Some((ckpt.generator, ckpt.config.generator))
        };
        let utts = corpus.split(split);
        let (mut frame_errors, mut frames, mut word_errors, mut words, mut no_path) = (0, 0, 0.0, 0, 0);
        for u in utts {
            let gold = u.frame_phonemes();
            let lattice = match &generator {
                None => PhonemeLattice::oracle(&gold, k)?,
                Some((store, gcfg)) => generate(store, gcfg, &u.features.frames)?,
            };
            let (e, n) = frame_error_rate(&lattice, &gold)?;
            frame_errors += e;
            frames += n;
            let result = decode(&lattice, &lex, Collapse::Repeats)?;
            no_path += usize::from(result.no_path);
            word_errors += wer(&result.subwords, &u.subwords)? * u.subwords.len() as f64;
            words += u.subwords.len();
        }
        let summary = DecodeSummary {
            split,
            oracle,
            utterances: utts.len(),
            per: frame_errors as f64 / frames.max(1) as f64,
            wer: word_errors / words.max(1) as f64,
            no_path,
        };
        let name = format!("decode-{}-{}.json", split.name(), if oracle { "oracle" } else { "bridge" });
        write_json(&self.root.join(name), &summary)?;
        Ok(summary)
    }
}
