//! Denoising pretraining: corrupted input, original sequence as target.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{decode_graph, encode_graph, init_lm, LmConfig, Vocab};
use super::LmError;
use crate::numerics::nn::nll_sum;
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub mask_rate: f64,
    /// Probability that a deletion span starts at a given position.
    pub deletion_rate: f64,
    /// Deletion spans have length uniform in `1..=max_span`.
    pub max_span: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub model: LmConfig,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            deletion_rate: 0.05,
            max_span: 2,
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            model: LmConfig::default(),
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        for (name, r) in [("mask_rate", self.mask_rate), ("deletion_rate", self.deletion_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(LmError::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.max_span == 0 || self.batch_size == 0 {
            return Err(LmError::Config("max_span and batch_size must be >= 1".into()));
        }
        self.model.validate()
    }
}

/// Masks tokens and deletes short spans. Never returns an empty sequence.
pub fn corrupt(tokens: &[usize], cfg: &DenoiseConfig, vocab: Vocab, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if cfg.deletion_rate > 0.0 && rng.random::<f64>() < cfg.deletion_rate {
            i += rng.random_range(1..=cfg.max_span);
            continue;
        }
        if cfg.mask_rate > 0.0 && rng.random::<f64>() < cfg.mask_rate {
            out.push(vocab.mask());
        } else {
            out.push(tokens[i]);
        }
        i += 1;
    }
    if out.is_empty() {
        out.push(vocab.mask());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_perplexity: f64,
    pub dev_perplexity: f64,
    pub dev_token_accuracy: f64,
}

pub struct LmRun {
    pub store: ParamStore,
    pub vocab: Vocab,
    pub log: Vec<EpochLog>,
    pub unigram_dev_perplexity: f64,
}

/// Summed target NLL (target = sentence + EOS) and the count of correct
/// argmax predictions.
fn sequence_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LmConfig,
    vocab: Vocab,
    noisy: &[usize],
    target: &[usize],
) -> Result<(Var, usize), LmError> {
    let memory = encode_graph(g, store, cfg, vocab, noisy)?;
    let mut inputs = vec![vocab.bos()];
    inputs.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(vocab.eos());
    let logits = decode_graph(g, store, cfg, memory, &inputs)?;
    let lp = g.log_softmax(logits);
    let probs = g.value(lp);
    let correct = gold.iter().enumerate().filter(|&(r, &t)| probs.argmax_row(r) == t).count();
    Ok((nll_sum(g, lp, &gold), correct))
}

/// Perplexity and token accuracy on `(noisy, clean)` pairs.
fn evaluate(store: &ParamStore, cfg: &LmConfig, vocab: Vocab, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<(f64, f64), LmError> {
    let (mut nll, mut tokens, mut correct) = (0.0, 0, 0);
    for (noisy, clean) in pairs {
        let mut g = Graph::new();
        let (l, c) = sequence_loss(&mut g, store, cfg, vocab, noisy, clean)?;
        nll += g.scalar(l);
        tokens += clean.len() + 1;
        correct += c;
    }
    Ok(((nll / tokens as f64).exp(), correct as f64 / tokens as f64))
}

/// Add-one unigram model over subwords and EOS, fit on `train`.
pub fn unigram_perplexity(train: &[Vec<usize>], dev: &[Vec<usize>], subwords: usize) -> f64 {
    let mut counts = vec![1.0; subwords + 1];
    for s in train {
        for &t in s {
            counts[t] += 1.0;
        }
        counts[subwords] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0usize);
    for s in dev {
        for &t in s.iter().chain(std::iter::once(&subwords)) {
            nll -= (counts[t] / total).ln();
            n += 1;
        }
    }
    (nll / n.max(1) as f64).exp()
}

/// Trains the model to reconstruct each sentence from a fresh corruption.
/// `dev` is corrupted once with a fixed stream so perplexities are comparable
/// across epochs.
pub fn pretrain_lm(text: &[Vec<usize>], dev: &[Vec<usize>], subwords: usize, cfg: &DenoiseConfig, seed: u64) -> Result<LmRun, LmError> {
    cfg.validate()?;
    if text.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let vocab = Vocab { subwords };
    for s in text.iter().chain(dev) {
        if s.iter().any(|&t| t >= subwords) {
            return Err(LmError::OutOfVocabulary { token: *s.iter().max().unwrap(), vocab: subwords });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_lm(&cfg.model, vocab, &mut rng)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: Some(5.0), ..AdamConfig::default() });
    let mut dev_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    let dev_pairs: Vec<_> = dev.iter().map(|s| (corrupt(s, cfg, vocab, &mut dev_rng), s.clone())).collect();
    let mut order: Vec<usize> = (0..text.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(chunk.len());
            let mut batch_tokens = 0;
            for &i in chunk {
                let noisy = corrupt(&text[i], cfg, vocab, &mut rng);
                losses.push(sequence_loss(&mut g, &store, &cfg.model, vocab, &noisy, &text[i])?.0);
                batch_tokens += text[i].len() + 1;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l);
            }
            let value = g.scalar(total);
            if !value.is_finite() {
                return Err(LmError::Diverged(format!("epoch {epoch}: loss {value}")));
            }
            nll += value;
            tokens += batch_tokens;
            let loss = g.scale(total, 1.0 / batch_tokens as f64);
            let grads = g.backward(loss)?;
            opt.step(&mut store, &grads)?;
        }
        let (dev_perplexity, dev_token_accuracy) =
            if dev_pairs.is_empty() { (f64::NAN, f64::NAN) } else { evaluate(&store, &cfg.model, vocab, &dev_pairs)? };
        log.push(EpochLog { epoch, train_perplexity: (nll / tokens as f64).exp(), dev_perplexity, dev_token_accuracy });
    }
    Ok(LmRun { store, vocab, log, unigram_dev_perplexity: unigram_perplexity(text, dev, subwords) })
}
