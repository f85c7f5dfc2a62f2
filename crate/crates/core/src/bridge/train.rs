//! Alternating discriminator / generator optimization of the bridge
//! objective.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lattice::{frame_error_rate, stride_map};
use super::losses::{
    diversity, gan_loss, generator_adversarial, gradient_penalty, reconstruction, smoothness, step_clusters,
    GeneratorObjective, PenaltyMode,
};
use super::model::{
    aux_logits, discriminator_score, generate, generator_forward, init_discriminator, init_generator, one_hot_rows,
    segment_average, DiscriminatorConfig, GeneratorConfig,
};
use super::select::{selection_score, PhonemeBigram};
use super::BridgeError;
use crate::corpus::{CorpusBundle, Utterance};
use crate::numerics::kmeans::{assign, kmeans};
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Smoothness weight.
    pub gamma: f64,
    /// Phoneme-diversity weight.
    pub eta: f64,
    /// Cluster-reconstruction weight.
    pub delta: f64,
    pub k_clusters: usize,
    pub kmeans_iters: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub discriminator_updates: usize,
    pub objective: GeneratorObjective,
    pub penalty: PenaltyMode,
    /// Dev phoneme error rate is logged every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Interval of label-free checkpoint selection (0 keeps the final generator).
    pub select_every: usize,
    /// Training utterances transcribed for each selection score.
    pub select_utterances: usize,
    /// Independent training runs; the best by selection score is kept.
    pub restarts: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda: 1.5,
            gamma: 0.1,
            eta: 1.0,
            delta: 0.3,
            k_clusters: 8,
            kmeans_iters: 25,
            steps: 2000,
            batch_size: 16,
            generator_lr: 2e-3,
            discriminator_lr: 2e-3,
            beta1: 0.5,
            beta2: 0.98,
            discriminator_updates: 4,
            objective: GeneratorObjective::NonSaturating,
            penalty: PenaltyMode::Exact,
            eval_every: 200,
            select_every: 0,
            select_utterances: 64,
            restarts: 3,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        let weights = [self.lambda, self.gamma, self.eta, self.delta];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(BridgeError::Config("loss weights must be finite and >= 0".into()));
        }
        if self.k_clusters < 2 {
            return Err(BridgeError::Config("k_clusters must be >= 2".into()));
        }
        if self.batch_size == 0 || self.discriminator_updates == 0 || self.restarts == 0 {
            return Err(BridgeError::Config("batch_size, discriminator_updates and restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub restart: usize,
    pub step: usize,
    pub gan: f64,
    pub gp: f64,
    pub sp: f64,
    pub pd: f64,
    pub ss: f64,
    pub disc_loss: f64,
    pub gen_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_per: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_score: Option<f64>,
}

/// Preprocessed training material.
pub struct BridgeData {
    pub features: Vec<Tensor>,
    /// Majority cluster per generator step of each training utterance.
    pub clusters: Vec<Vec<usize>>,
    /// One-hot phoneme sequences of the unpaired text.
    pub real: Vec<Tensor>,
    pub text_bigram: PhonemeBigram,
    pub dev: Vec<(Tensor, Vec<usize>)>,
    pub num_phonemes: usize,
    pub centroids: Tensor,
}

impl BridgeData {
    /// Clusters the training frames and expands the text through the lexicon.
    pub fn prepare(corpus: &CorpusBundle, cfg: &GanConfig, seed: u64) -> Result<Self, BridgeError> {
        if corpus.unpaired_text.is_empty() || corpus.train.is_empty() {
            return Err(BridgeError::EmptyBatch);
        }
        let d = corpus.spec.feature_dim();
        let all: Vec<f64> = corpus.train.iter().flat_map(|u| u.features.frames.data().iter().copied()).collect();
        let n = all.len() / d;
        let points = Tensor::from_rows(n, d, all);
        let km = kmeans(&points, cfg.k_clusters, cfg.kmeans_iters, seed)?;
        let mut clusters = Vec::with_capacity(corpus.train.len());
        let mut offset = 0;
        for u in &corpus.train {
            let t = u.features.len();
            let frame_clusters = &km.assignment[offset..offset + t];
            offset += t;
            let steps = cfg.generator.conv().output_len(t)?;
            clusters.push(step_clusters(frame_clusters, &stride_map(t, steps)?, cfg.k_clusters));
        }
        let k = corpus.spec.num_phonemes();
        let texts: Vec<Vec<usize>> = corpus.unpaired_text.iter().map(|s| corpus.spec.expand(s)).collect();
        let real = texts.iter().map(|s| one_hot_rows(s, k)).collect();
        let dev = corpus.dev.iter().map(|u| (u.features.frames.clone(), u.frame_phonemes())).collect();
        Ok(Self {
            features: corpus.train.iter().map(|u| u.features.frames.clone()).collect(),
            clusters,
            real,
            text_bigram: PhonemeBigram::fit(&texts, k),
            dev,
            num_phonemes: k,
            centroids: km.centroids,
        })
    }

    /// Cluster ids of arbitrary frames under the training centroids.
    pub fn frame_clusters(&self, frames: &Tensor) -> Vec<usize> {
        assign(frames, &self.centroids).0
    }
}

/// Indices drawn for one update.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub utterances: Vec<usize>,
    pub texts: Vec<usize>,
    pub mu: f64,
}

impl Batch {
    pub fn sample(data: &BridgeData, size: usize, rng: &mut impl Rng) -> Self {
        Self {
            utterances: (0..size).map(|_| rng.random_range(0..data.features.len())).collect(),
            texts: (0..size).map(|_| rng.random_range(0..data.real.len())).collect(),
            mu: rng.random::<f64>(),
        }
    }
}

/// Loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Terms {
    pub gan: f64,
    pub gp: f64,
    pub sp: f64,
    pub pd: f64,
    pub ss: f64,
}

/// Segment-averaged generator distributions for the batch, as constants.
fn fake_inputs(gen: &ParamStore, cfg: &GanConfig, data: &BridgeData, batch: &Batch) -> Result<Vec<Tensor>, BridgeError> {
    batch
        .utterances
        .iter()
        .map(|&i| {
            let mut g = Graph::new();
            let out = generator_forward(&mut g, gen, &cfg.generator, &data.features[i])?;
            let p = g.softmax(out.logits);
            let s = segment_average(&mut g, p);
            Ok(g.value(s).clone())
        })
        .collect()
}

/// Builds `-L_gan + lambda * L_gp` for the discriminator.
pub fn discriminator_objective(
    g: &mut Graph,
    gen: &ParamStore,
    disc: &ParamStore,
    cfg: &GanConfig,
    data: &BridgeData,
    batch: &Batch,
) -> Result<(Var, Terms), BridgeError> {
    let fakes = fake_inputs(gen, cfg, data, batch)?;
    let mut real_scores = Vec::new();
    let mut fake_scores = Vec::new();
    let mut penalties = Vec::new();
    for (&ti, fake) in batch.texts.iter().zip(&fakes) {
        let real = &data.real[ti];
        let rv = g.constant(real.clone());
        real_scores.push(discriminator_score(g, disc, &cfg.discriminator, rv)?);
        let fv = g.constant(fake.clone());
        fake_scores.push(discriminator_score(g, disc, &cfg.discriminator, fv)?);
        if cfg.lambda > 0.0 {
            let mut critic = |g: &mut Graph, x: Var| discriminator_score(g, disc, &cfg.discriminator, x);
            penalties.push(gradient_penalty(g, &mut critic, real, fake, batch.mu, cfg.penalty)?);
        }
    }
    let gan = gan_loss(g, &real_scores, &fake_scores)?;
    let mut terms = Terms { gan: g.scalar(gan), ..Terms::default() };
    let mut loss = g.scale(gan, -1.0);
    if !penalties.is_empty() {
        let gp = mean(g, &penalties);
        terms.gp = g.scalar(gp);
        let w = g.scale(gp, cfg.lambda);
        loss = g.add(loss, w);
    }
    Ok((loss, terms))
}

/// Builds the generator objective: adversarial term plus weighted
/// smoothness, diversity and reconstruction.
pub fn generator_objective(
    g: &mut Graph,
    gen: &ParamStore,
    disc: &ParamStore,
    cfg: &GanConfig,
    data: &BridgeData,
    batch: &Batch,
) -> Result<(Var, Terms), BridgeError> {
    let mut fake_scores = Vec::new();
    let mut probs = Vec::new();
    let mut sps = Vec::new();
    let mut sss = Vec::new();
    for &i in &batch.utterances {
        let out = generator_forward(g, gen, &cfg.generator, &data.features[i])?;
        let p = g.softmax(out.logits);
        let seg = segment_average(g, p);
        fake_scores.push(discriminator_score(g, disc, &cfg.discriminator, seg)?);
        sps.push(smoothness(g, p));
        let aux = aux_logits(g, gen, out.hidden);
        sss.push(reconstruction(g, aux, &data.clusters[i])?);
        probs.push(p);
    }
    let adv = generator_adversarial(g, &fake_scores, cfg.objective)?;
    let sp = mean(g, &sps);
    let pd = diversity(g, &probs)?;
    let ss = mean(g, &sss);
    let terms = Terms { gan: g.scalar(adv), gp: 0.0, sp: g.scalar(sp), pd: g.scalar(pd), ss: g.scalar(ss) };
    let mut loss = adv;
    for (term, w) in [(sp, cfg.gamma), (pd, cfg.eta), (ss, cfg.delta)] {
        let t = g.scale(term, w);
        loss = g.add(loss, t);
    }
    Ok((loss, terms))
}

fn mean(g: &mut Graph, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x);
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// Trainable state of a bridge run.
pub struct BridgeState {
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    gen_opt: Adam,
    disc_opt: Adam,
}

impl BridgeState {
    pub fn new(cfg: &GanConfig, feature_dim: usize, num_phonemes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = ParamStore::new();
        init_generator(&mut generator, &cfg.generator, feature_dim, num_phonemes, cfg.k_clusters, &mut rng);
        let mut discriminator = ParamStore::new();
        init_discriminator(&mut discriminator, &cfg.discriminator, num_phonemes, &mut rng);
        let adam = |lr| AdamConfig { lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
        Self {
            generator,
            discriminator,
            gen_opt: Adam::new(adam(cfg.generator_lr)),
            disc_opt: Adam::new(adam(cfg.discriminator_lr)),
        }
    }

    /// One discriminator update; returns the loss before the update.
    pub fn discriminator_step(&mut self, cfg: &GanConfig, data: &BridgeData, batch: &Batch) -> Result<(f64, Terms), BridgeError> {
        self.generator.set_frozen_all(true);
        let mut g = Graph::new();
        let built = discriminator_objective(&mut g, &self.generator, &self.discriminator, cfg, data, batch);
        self.generator.set_frozen_all(false);
        let (loss, terms) = built?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(BridgeError::Diverged(format!("discriminator loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.disc_opt.step(&mut self.discriminator, &grads)?;
        Ok((value, terms))
    }

    /// One generator update with the discriminator held fixed.
    pub fn generator_step(&mut self, cfg: &GanConfig, data: &BridgeData, batch: &Batch) -> Result<(f64, Terms), BridgeError> {
        self.discriminator.set_frozen_all(true);
        let mut g = Graph::new();
        let built = generator_objective(&mut g, &self.generator, &self.discriminator, cfg, data, batch);
        self.discriminator.set_frozen_all(false);
        let (loss, terms) = built?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(BridgeError::Diverged(format!("generator loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.gen_opt.step(&mut self.generator, &grads)?;
        Ok((value, terms))
    }
}

/// Frame-level phoneme error rate of `generator` on `(features, gold)` pairs.
pub fn phoneme_error_rate(
    generator: &ParamStore,
    cfg: &GeneratorConfig,
    items: &[(Tensor, Vec<usize>)],
) -> Result<f64, BridgeError> {
    let (mut errors, mut total) = (0, 0);
    for (x, gold) in items {
        let lat = generate(generator, cfg, x)?;
        let (e, n) = frame_error_rate(&lat, gold)?;
        errors += e;
        total += n;
    }
    Ok(errors as f64 / total.max(1) as f64)
}

/// Phoneme error rate over utterances.
pub fn utterance_per(generator: &ParamStore, cfg: &GeneratorConfig, utts: &[Utterance]) -> Result<f64, BridgeError> {
    let items: Vec<(Tensor, Vec<usize>)> = utts.iter().map(|u| (u.features.frames.clone(), u.frame_phonemes())).collect();
    phoneme_error_rate(generator, cfg, &items)
}

pub struct BridgeRun {
    /// Holds the selected generator when selection is enabled.
    pub state: BridgeState,
    pub log: Vec<LogRecord>,
    pub dev_per: f64,
    /// Step of the kept snapshot within the selected restart.
    pub selected_step: Option<usize>,
    pub selected_restart: usize,
    /// Selection score of every restart; lower is better.
    pub restart_scores: Vec<f64>,
}

/// Seed of restart `r`; restart 0 uses the run seed itself.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Full adversarial training: `cfg.restarts` independent runs of
/// `cfg.steps` steps, keeping the one whose transcriptions score best under
/// the text bigram model. No labels are consulted.
pub fn train_bridge(corpus: &CorpusBundle, cfg: &GanConfig, seed: u64) -> Result<BridgeRun, BridgeError> {
    cfg.validate()?;
    let data = BridgeData::prepare(corpus, cfg, seed)?;
    let probe = &data.features[..cfg.select_utterances.min(data.features.len())];
    let mut log = Vec::with_capacity(cfg.steps * cfg.restarts);
    let mut best: Option<(f64, usize, BridgeState, Option<usize>)> = None;
    let mut restart_scores = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let (state, records, selected_step) = train_once(corpus.spec.feature_dim(), cfg, &data, restart_seed(seed, r), r)?;
        log.extend(records);
        let score = selection_score(&state.generator, &cfg.generator, probe, &data.text_bigram)?.value;
        restart_scores.push(score);
        if best.as_ref().is_none_or(|(b, ..)| score < *b) {
            best = Some((score, r, state, selected_step));
        }
    }
    let (_, selected_restart, state, selected_step) = best.expect("at least one restart");
    let dev_per = phoneme_error_rate(&state.generator, &cfg.generator, &data.dev)?;
    Ok(BridgeRun { state, log, dev_per, selected_step, selected_restart, restart_scores })
}

fn train_once(
    feature_dim: usize,
    cfg: &GanConfig,
    data: &BridgeData,
    seed: u64,
    restart: usize,
) -> Result<(BridgeState, Vec<LogRecord>, Option<usize>), BridgeError> {
    let mut state = BridgeState::new(cfg, feature_dim, data.num_phonemes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A09_E667_F3BC_C908);
    let mut log = Vec::with_capacity(cfg.steps);
    let probe = &data.features[..cfg.select_utterances.min(data.features.len())];
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for step in 0..cfg.steps {
        let mut d_loss = 0.0;
        let mut d_terms = Terms::default();
        for _ in 0..cfg.discriminator_updates {
            let batch = Batch::sample(&data, cfg.batch_size, &mut rng);
            (d_loss, d_terms) = state.discriminator_step(cfg, &data, &batch)?;
        }
        let batch = Batch::sample(&data, cfg.batch_size, &mut rng);
        let (g_loss, g_terms) = state.generator_step(cfg, &data, &batch)?;
        let last = step + 1 == cfg.steps;
        let dev_per = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Some(phoneme_error_rate(&state.generator, &cfg.generator, &data.dev)?)
        } else {
            None
        };
        let select_score = if cfg.select_every > 0 && (last || (step + 1) % cfg.select_every == 0) {
            let score = selection_score(&state.generator, &cfg.generator, probe, &data.text_bigram)?.value;
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, step, state.generator.clone()));
            }
            Some(score)
        } else {
            None
        };
        log.push(LogRecord {
            restart,
            step,
            gan: d_terms.gan,
            gp: d_terms.gp,
            sp: g_terms.sp,
            pd: g_terms.pd,
            ss: g_terms.ss,
            disc_loss: d_loss,
            gen_loss: g_loss,
            dev_per,
            select_score,
        });
    }
    let selected_step = best.map(|(_, step, generator)| {
        state.generator = generator;
        step
    });
    Ok((state, log, selected_step))
}

pub fn write_log(log: &[LogRecord], path: &Path) -> Result<(), BridgeError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(crate::numerics::NumericsError::from)?);
    for r in log {
        serde_json::to_writer(&mut f, r).map_err(crate::numerics::NumericsError::from)?;
        f.write_all(b"\n").map_err(crate::numerics::NumericsError::from)?;
    }
    f.flush().map_err(crate::numerics::NumericsError::from)?;
    Ok(())
}

/// Both loss evaluations on a fixed batch, without updating anything.
pub fn evaluate_objective(
    generator: &ParamStore,
    discriminator: &ParamStore,
    cfg: &GanConfig,
    data: &BridgeData,
    batch: &Batch,
) -> Result<(f64, f64), BridgeError> {
    let mut g = Graph::new();
    let (d, _) = discriminator_objective(&mut g, generator, discriminator, cfg, data, batch)?;
    let mut h = Graph::new();
    let (l, _) = generator_objective(&mut h, generator, discriminator, cfg, data, batch)?;
    Ok((g.scalar(d), h.scalar(l)))
}

/// Writes `config.json`, `generator/` and `discriminator/` under `dir`.
pub fn save_checkpoint(state: &BridgeState, cfg: &GanConfig, dir: &Path) -> Result<(), BridgeError> {
    state.generator.save(&dir.join("generator"))?;
    state.discriminator.save(&dir.join("discriminator"))?;
    let text = serde_json::to_string_pretty(cfg).map_err(crate::numerics::NumericsError::from)?;
    fs::write(dir.join("config.json"), text).map_err(crate::numerics::NumericsError::from)?;
    Ok(())
}

pub struct Checkpoint {
    pub config: GanConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, BridgeError> {
    let text = fs::read_to_string(dir.join("config.json")).map_err(crate::numerics::NumericsError::from)?;
    let config = serde_json::from_str(&text).map_err(crate::numerics::NumericsError::from)?;
    Ok(Checkpoint {
        config,
        generator: ParamStore::load(&dir.join("generator"))?,
        discriminator: ParamStore::load(&dir.join("discriminator"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_language, generate_corpus, CorpusCounts, LanguageSizes};

    fn small() -> CorpusBundle {
        let spec = build_language(5, LanguageSizes::default()).unwrap();
        let counts = CorpusCounts { train: 24, dev: 8, test: 4, text_only: 60 };
        generate_corpus(&spec, counts, 0.1).unwrap()
    }

    fn quick(steps: usize) -> GanConfig {
        GanConfig { steps, batch_size: 4, eval_every: 0, kmeans_iters: 5, restarts: 1, ..GanConfig::default() }
    }

    #[test]
    fn runs_are_deterministic() {
        let c = small();
        let a = train_bridge(&c, &quick(3), 9).unwrap();
        let b = train_bridge(&c, &quick(3), 9).unwrap();
        assert_eq!(a.state.generator.fingerprint(), b.state.generator.fingerprint());
        assert_eq!(a.state.discriminator.fingerprint(), b.state.discriminator.fingerprint());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert!(a.log[2].dev_per.is_some());
    }

    #[test]
    fn restarts_keep_the_best_scoring_run() {
        let c = small();
        let cfg = GanConfig { restarts: 3, ..quick(4) };
        let run = train_bridge(&c, &cfg, 5).unwrap();
        assert_eq!(run.log.len(), 12);
        assert_eq!(run.log.iter().map(|r| r.restart).collect::<Vec<_>>(), [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        let best = run.restart_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(run.restart_scores[run.selected_restart], best);
        // The kept generator is exactly the one that restart produces alone.
        let data = BridgeData::prepare(&c, &cfg, 5).unwrap();
        let (alone, _, _) = train_once(c.spec.feature_dim(), &cfg, &data, restart_seed(5, run.selected_restart), run.selected_restart).unwrap();
        assert_eq!(alone.generator.fingerprint(), run.state.generator.fingerprint());
        // A single restart is the plain run under the run seed.
        let single = train_bridge(&c, &GanConfig { restarts: 1, ..cfg.clone() }, 5).unwrap();
        assert_eq!(single.log[..], run.log[..4]);
    }

    #[test]
    fn zero_weights_drop_auxiliary_terms() {
        let c = small();
        let cfg = GanConfig { gamma: 0.0, eta: 0.0, delta: 0.0, ..quick(1) };
        let data = BridgeData::prepare(&c, &cfg, 1).unwrap();
        let state = BridgeState::new(&cfg, c.spec.feature_dim(), data.num_phonemes, 1);
        let batch = Batch::sample(&data, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let (loss, terms) = generator_objective(&mut g, &state.generator, &state.discriminator, &cfg, &data, &batch).unwrap();
        assert_eq!(g.scalar(loss), terms.gan);
        assert!(terms.sp > 0.0 && terms.ss > 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("aux.out.w").is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn updates_touch_only_their_side() {
        let c = small();
        let cfg = quick(1);
        let data = BridgeData::prepare(&c, &cfg, 3).unwrap();
        let mut state = BridgeState::new(&cfg, c.spec.feature_dim(), data.num_phonemes, 3);
        let batch = Batch::sample(&data, 4, &mut ChaCha8Rng::seed_from_u64(4));
        let (g0, d0) = (state.generator.hashes(), state.discriminator.hashes());
        state.discriminator_step(&cfg, &data, &batch).unwrap();
        assert_eq!(state.generator.hashes(), g0);
        let d1 = state.discriminator.hashes();
        assert!(d1.iter().zip(&d0).all(|(a, b)| a != b));
        state.generator_step(&cfg, &data, &batch).unwrap();
        assert_eq!(state.discriminator.hashes(), d1);
        assert!(state.generator.hashes().iter().zip(&g0).all(|(a, b)| a != b));
    }

    #[test]
    fn discriminator_loss_falls_on_fixed_batch() {
        let c = small();
        let cfg = GanConfig { gamma: 0.0, eta: 0.0, delta: 0.0, lambda: 0.0, ..quick(1) };
        let data = BridgeData::prepare(&c, &cfg, 5).unwrap();
        let mut state = BridgeState::new(&cfg, c.spec.feature_dim(), data.num_phonemes, 5);
        let batch = Batch::sample(&data, 8, &mut ChaCha8Rng::seed_from_u64(6));
        let first = state.discriminator_step(&cfg, &data, &batch).unwrap().0;
        let mut last = first;
        for _ in 0..49 {
            last = state.discriminator_step(&cfg, &data, &batch).unwrap().0;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_reload_reproduces_objective() {
        let c = small();
        let cfg = quick(2);
        let run = train_bridge(&c, &cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&run.state, &cfg, dir.path()).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.config, cfg);
        assert!(ck.generator.get("aux.out.w").is_some_and(|p| !p.exported));
        let data = BridgeData::prepare(&c, &cfg, 7).unwrap();
        let batch = Batch::sample(&data, 4, &mut ChaCha8Rng::seed_from_u64(8));
        let before = evaluate_objective(&run.state.generator, &run.state.discriminator, &cfg, &data, &batch).unwrap();
        let after = evaluate_objective(&ck.generator, &ck.discriminator, &cfg, &data, &batch).unwrap();
        assert!((before.0 - after.0).abs() <= 1e-6 && (before.1 - after.1).abs() <= 1e-6);
    }

    #[test]
    fn log_is_jsonl() {
        let c = small();
        let run = train_bridge(&c, &quick(2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&run.log, &path).unwrap();
        let lines: Vec<LogRecord> =
            fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, run.log);
    }

    #[test]
    fn rejects_negative_weight() {
        let c = small();
        let cfg = GanConfig { eta: -1.0, ..quick(1) };
        assert!(matches!(train_bridge(&c, &cfg, 0), Err(BridgeError::Config(_))));
    }
}
