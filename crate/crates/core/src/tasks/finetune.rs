//! Downstream training of the head (and any registry parameters) on top of
//! an assembled model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{
    ic_logits, init_ic, init_span, init_tag, span_logits, tag_logits, word_labels, TagVocab,
};
use super::metrics::{accuracy, ff1_aos, best_span, wer, F1Counts};
use super::TaskError;
use crate::corpus::{CorpusBundle, Split, Utterance};
use crate::fusion::{AssembledModel, Prepared, Variant};
use crate::lm::upsample_indices;
use crate::numerics::ctc::{ctc_loss_node, greedy_decode};
use crate::numerics::nn::nll_sum;
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ic,
    Sf,
    Ner,
    Sqa,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ic, Task::Sf, Task::Ner, Task::Sqa];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ic => "ic",
            Task::Sf => "sf",
            Task::Ner => "ner",
            Task::Sqa => "sqa",
        }
    }

    /// Metric used for the dev trajectory.
    pub fn primary_metric(self) -> &'static str {
        match self {
            Task::Ic => "accuracy",
            Task::Sf | Task::Ner => "f1",
            Task::Sqa => "ff1",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ic_hidden: usize,
    pub tag_hidden: usize,
    /// Dev evaluation interval (0 = only at the end).
    pub eval_every: usize,
    pub clip_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 8, lr: 3e-3, ic_hidden: 64, tag_hidden: 128, eval_every: 100, clip_norm: 5.0 }
    }
}

/// Target of one example.
#[derive(Clone, Debug)]
enum Target {
    Intent(usize),
    Tags { tokens: Vec<usize> },
    Span { question: Box<Prepared>, span: (usize, usize), gold_frames: (usize, usize) },
}

#[derive(Clone, Debug)]
struct Example {
    input: Prepared,
    target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub variant: Variant,
    pub split: Split,
    pub metrics: BTreeMap<String, f64>,
    /// `(step, dev primary metric)` pairs.
    pub trajectory: Vec<(usize, f64)>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
    /// Examples left out of training or scoring (infeasible targets, empty decodes).
    pub skipped: usize,
    pub predictions: Vec<Prediction>,
}

/// Whether span prediction runs over decoded tokens rather than frames.
fn token_level_spans(v: Variant) -> bool {
    matches!(v, Variant::SspBase | Variant::SspPlusAp)
}

/// Filled token index of every frame of a prepared passage.
fn frame_tokens(p: &Prepared) -> Option<Vec<usize>> {
    let d = p.decoded.as_ref()?;
    if d.subwords.is_empty() {
        return None;
    }
    upsample_indices(d.subwords.len(), Some(&d.frame_alignment), d.frame_alignment.len()).ok().flatten()
}

/// Frame span covered by tokens `s..=e`.
fn token_span_to_frames(map: &[usize], s: usize, e: usize) -> (usize, usize) {
    let frames: Vec<usize> = (0..map.len()).filter(|&f| map[f] >= s && map[f] <= e).collect();
    match (frames.first(), frames.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (1, 0),
    }
}

fn label_count(task: Task, corpus: &CorpusBundle) -> usize {
    match task {
        Task::Ner => corpus.spec.num_entities,
        _ => corpus.spec.slots.len(),
    }
}

fn tag_vocab(task: Task, corpus: &CorpusBundle) -> TagVocab {
    TagVocab { subwords: corpus.spec.num_subwords(), labels: label_count(task, corpus) }
}

/// Runs the frozen pipeline on a split. Returns examples and the number
/// skipped.
fn build_examples(model: &AssembledModel, task: Task, corpus: &CorpusBundle, utts: &[Utterance]) -> Result<(Vec<Example>, usize), TaskError> {
    let mut out = Vec::with_capacity(utts.len());
    let mut skipped = 0;
    for u in utts {
        match task {
            Task::Ic => {
                let intent = u.intent.ok_or(TaskError::MissingLabel("intent"))?;
                out.push(Example { input: model.prepare(&u.features.frames)?, target: Target::Intent(intent) });
            }
            Task::Sf | Task::Ner => {
                let tags = u.slots.as_ref().ok_or(TaskError::MissingLabel("slots"))?;
                let labels = if task == Task::Ner {
                    word_labels(tags, |s| corpus.spec.slots[s].entity)
                } else {
                    word_labels(tags, |s| s)
                };
                let tokens = tag_vocab(task, corpus).target(&u.subwords, &labels);
                out.push(Example { input: model.prepare(&u.features.frames)?, target: Target::Tags { tokens } });
            }
            Task::Sqa => {
                let qa = u.qa.as_ref().ok_or(TaskError::MissingLabel("qa"))?;
                let passage = model.prepare(&qa.passage.features.frames)?;
                let question = model.prepare(&qa.question.features.frames)?;
                let span = if token_level_spans(model.variant) {
                    let (Some(map), true) = (frame_tokens(&passage), !question.tokens().is_empty()) else {
                        skipped += 1;
                        continue;
                    };
                    (map[qa.answer_span.0], map[qa.answer_span.1])
                } else {
                    qa.answer_span
                };
                out.push(Example {
                    input: passage,
                    target: Target::Span { question: Box::new(question), span, gold_frames: qa.answer_span },
                });
            }
        }
    }
    Ok((out, skipped))
}

/// Per-position representation for span prediction.
fn span_input(model: &AssembledModel, g: &mut Graph, p: &Prepared) -> Result<Var, TaskError> {
    if token_level_spans(model.variant) {
        model.semantic(g, p)?.ok_or(TaskError::EmptyDecode)
    } else {
        Ok(model.forward(g, p)?)
    }
}

/// Loss of one example, or `None` when its target is infeasible.
fn example_loss(model: &AssembledModel, vocab: TagVocab, g: &mut Graph, ex: &Example) -> Result<Option<Var>, TaskError> {
    match &ex.target {
        Target::Intent(c) => {
            let z = model.forward(g, &ex.input)?;
            let logits = ic_logits(g, &model.store, z);
            let lp = g.log_softmax(logits);
            Ok(Some(nll_sum(g, lp, &[*c])))
        }
        Target::Tags { tokens } => {
            let z = model.forward(g, &ex.input)?;
            let logits = tag_logits(g, &model.store, z);
            let lp = g.log_softmax(logits);
            Ok(ctc_loss_node(g, lp, tokens, vocab.blank())?.ok())
        }
        Target::Span { question, span, .. } => {
            let q = span_input(model, g, question)?;
            let p = span_input(model, g, &ex.input)?;
            let scores = span_logits(g, &model.store, q, p);
            let start = g.slice_cols(scores, 0, 1);
            let end = g.slice_cols(scores, 1, 1);
            let (st, et) = (g.transpose(start), g.transpose(end));
            let (ls, le) = (g.log_softmax(st), g.log_softmax(et));
            let a = nll_sum(g, ls, &[span.0]);
            let b = nll_sum(g, le, &[span.1]);
            Ok(Some(g.add(a, b)))
        }
    }
}

/// Predicted and gold label vectors of one example.
fn predict(model: &AssembledModel, vocab: TagVocab, ex: &Example) -> Result<(Vec<usize>, Vec<usize>), TaskError> {
    let mut g = Graph::new();
    match &ex.target {
        Target::Intent(c) => {
            let z = model.forward(&mut g, &ex.input)?;
            let logits = ic_logits(&mut g, &model.store, z);
            Ok((vec![g.value(logits).argmax_row(0)], vec![*c]))
        }
        Target::Tags { tokens } => {
            let z = model.forward(&mut g, &ex.input)?;
            let logits = tag_logits(&mut g, &model.store, z);
            Ok((greedy_decode(g.value(logits), vocab.blank()), tokens.clone()))
        }
        Target::Span { question, gold_frames, .. } => {
            let q = span_input(model, &mut g, question)?;
            let p = span_input(model, &mut g, &ex.input)?;
            let sv = span_logits(&mut g, &model.store, q, p);
            let scores = g.value(sv).clone();
            let n = scores.rows();
            let start: Vec<f64> = (0..n).map(|r| scores.get(r, 0)).collect();
            let end: Vec<f64> = (0..n).map(|r| scores.get(r, 1)).collect();
            let (s, e) = best_span(&start, &end).ok_or(TaskError::EmptyDecode)?;
            let frames = if token_level_spans(model.variant) {
                let map = frame_tokens(&ex.input).ok_or(TaskError::EmptyDecode)?;
                token_span_to_frames(&map, s, e)
            } else {
                (s, e)
            };
            Ok((vec![frames.0, frames.1], vec![gold_frames.0, gold_frames.1]))
        }
    }
}

/// Scores predictions; metrics are recomputable from the predictions alone.
pub fn score(task: Task, vocab: TagVocab, predictions: &[Prediction]) -> Result<BTreeMap<String, f64>, TaskError> {
    let mut m = BTreeMap::new();
    match task {
        Task::Ic => {
            let pred: Vec<usize> = predictions.iter().map(|p| p.predicted[0]).collect();
            let gold: Vec<usize> = predictions.iter().map(|p| p.gold[0]).collect();
            m.insert("accuracy".into(), accuracy(&pred, &gold));
        }
        Task::Sf | Task::Ner => {
            let mut counts = F1Counts::default();
            let mut errors = 0.0;
            let mut words = 0.0;
            for p in predictions {
                counts.add(F1Counts::of(&vocab.spans(&p.predicted), &vocab.spans(&p.gold)));
                let strip = |t: &[usize]| t.iter().copied().filter(|&x| x < vocab.subwords).collect::<Vec<_>>();
                let gold = strip(&p.gold);
                errors += wer(&strip(&p.predicted), &gold)? * gold.len() as f64;
                words += gold.len() as f64;
            }
            m.insert("f1".into(), counts.f1());
            m.insert("wer".into(), if words > 0.0 { errors / words } else { 0.0 });
        }
        Task::Sqa => {
            let (mut f, mut a) = (0.0, 0.0);
            for p in predictions {
                let (x, y) = ff1_aos((p.predicted[0], p.predicted[1]), (p.gold[0], p.gold[1]))?;
                f += x;
                a += y;
            }
            let n = predictions.len().max(1) as f64;
            m.insert("ff1".into(), f / n);
            m.insert("aos".into(), a / n);
        }
    }
    Ok(m)
}

fn evaluate_examples(model: &AssembledModel, vocab: TagVocab, examples: &[Example]) -> Result<Vec<Prediction>, TaskError> {
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let (predicted, gold) = predict(model, vocab, ex)?;
            Ok(Prediction { index, predicted, gold })
        })
        .collect()
}

/// Adds the task head to the model store.
pub fn attach_head(model: &mut AssembledModel, task: Task, corpus: &CorpusBundle, cfg: &FinetuneConfig, rng: &mut impl Rng) -> Result<(), TaskError> {
    if task == Task::Sqa && token_level_spans(model.variant) {
        let width = model.semantic_width();
        init_span(&mut model.store, width, rng);
    } else {
        let width = model.width();
        match task {
            Task::Ic => init_ic(&mut model.store, width, cfg.ic_hidden, corpus.spec.num_intents(), rng),
            Task::Sf | Task::Ner => init_tag(&mut model.store, width, cfg.tag_hidden, tag_vocab(task, corpus).size(), rng),
            Task::Sqa => init_span(&mut model.store, width, rng),
        }
    }
    model.apply_registry();
    Ok(())
}

/// Trains the head and registry parameters on `corpus.train`, tracks the
/// dev metric, and reports on `eval_split`.
pub fn finetune(
    model: &mut AssembledModel,
    task: Task,
    corpus: &CorpusBundle,
    cfg: &FinetuneConfig,
    eval_split: Split,
    seed: u64,
) -> Result<EvalReport, TaskError> {
    if cfg.batch_size == 0 {
        return Err(TaskError::Config("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    attach_head(model, task, corpus, cfg, &mut rng)?;
    let vocab = tag_vocab(task, corpus);
    let (train, mut skipped) = build_examples(model, task, corpus, &corpus.train)?;
    let (dev, _) = build_examples(model, task, corpus, &corpus.dev)?;
    if train.is_empty() {
        return Err(TaskError::NoExamples);
    }
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: Some(cfg.clip_norm), ..AdamConfig::default() });
    let mut infeasible = vec![false; train.len()];
    let mut trajectory = Vec::new();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..train.len());
            match example_loss(model, vocab, &mut g, &train[i])? {
                Some(l) => losses.push(l),
                None => infeasible[i] = true,
            }
        }
        if losses.is_empty() {
            continue;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let loss = g.scale(total, 1.0 / losses.len() as f64);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(TaskError::Diverged(format!("step {step}: loss {value}")));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut model.store, &grads)?;
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !dev.is_empty() {
            let preds = evaluate_examples(model, vocab, &dev)?;
            trajectory.push((step + 1, score(task, vocab, &preds)?[task.primary_metric()]));
        }
    }
    skipped += infeasible.iter().filter(|&&x| x).count();
    let (eval, eval_skipped) = match eval_split {
        Split::Train => (train, 0),
        Split::Dev => (dev, 0),
        Split::Test => build_examples(model, task, corpus, &corpus.test)?,
    };
    let predictions = evaluate_examples(model, vocab, &eval)?;
    let metrics = score(task, vocab, &predictions)?;
    let trainable_params = model.store.trainable_count();
    let total_params = model.store.count() + model.upstream_param_count();
    Ok(EvalReport {
        task,
        variant: model.variant,
        split: eval_split,
        metrics,
        trajectory,
        trainable_params,
        total_params,
        trainable_fraction: trainable_params as f64 / total_params as f64,
        skipped: skipped + eval_skipped,
        predictions,
    })
}

/// Scores a model whose head is already attached and trained.
pub fn evaluate(model: &AssembledModel, task: Task, corpus: &CorpusBundle, split: Split) -> Result<EvalReport, TaskError> {
    let vocab = tag_vocab(task, corpus);
    let (examples, skipped) = build_examples(model, task, corpus, corpus.split(split))?;
    let predictions = evaluate_examples(model, vocab, &examples)?;
    let metrics = score(task, vocab, &predictions)?;
    let trainable_params = model.store.trainable_count();
    let total_params = model.store.count() + model.upstream_param_count();
    Ok(EvalReport {
        task,
        variant: model.variant,
        split,
        metrics,
        trajectory: Vec::new(),
        trainable_params,
        total_params,
        trainable_fraction: trainable_params as f64 / total_params as f64,
        skipped,
        predictions,
    })
}

/// Sum-pooled fused representation of each utterance (`N x width`).
pub fn pooled_embeddings(model: &AssembledModel, utts: &[Utterance]) -> Result<crate::numerics::Tensor, TaskError> {
    let mut rows = Vec::with_capacity(utts.len() * model.width());
    for u in utts {
        let p = model.prepare(&u.features.frames)?;
        let mut g = Graph::new();
        let z = model.forward(&mut g, &p)?;
        let s = g.sum_rows(z);
        rows.extend_from_slice(g.value(s).data());
    }
    Ok(crate::numerics::Tensor::from_rows(utts.len(), model.width(), rows))
}
