//! Convolutional generator, its auxiliary cluster head, and the sequence
//! discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lattice::{stride_map, PhonemeLattice};
use super::BridgeError;
use crate::numerics::nn::{conv1d, ConvSpec};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const GEN_GROUP: &str = "generator";
pub const AUX_GROUP: &str = "aux";
pub const DISC_GROUP: &str = "discriminator";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden: 32, width: 3, stride: 1, padding: 1, leaky_slope: 0.2 }
    }
}

impl GeneratorConfig {
    pub fn conv(&self) -> ConvSpec {
        ConvSpec { width: self.width, stride: self.stride, padding: self.padding }
    }

    /// Smallest input length producing at least one output step.
    pub fn receptive_field(&self) -> usize {
        self.width.saturating_sub(2 * self.padding).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden: 32, width: 3, leaky_slope: 0.2 }
    }
}

/// Hand-built generator that labels each frame with its nearest phoneme
/// prototype: score `2 x.mu - |mu|^2`, sharpened by `scale`. An upper bound
/// for decoding experiments.
pub fn prototype_generator(prototypes: &[Vec<f64>], scale: f64) -> (ParamStore, GeneratorConfig) {
    let (k, d) = (prototypes.len(), prototypes.first().map_or(0, Vec::len));
    let cfg = GeneratorConfig { hidden: k, width: 1, stride: 1, padding: 0, leaky_slope: 1.0 };
    let mut w = Tensor::zeros(d, k);
    let mut b = Tensor::zeros(1, k);
    for (p, mu) in prototypes.iter().enumerate() {
        for (i, &m) in mu.iter().enumerate() {
            w.set(i, p, 2.0 * m);
        }
        b.set(0, p, -mu.iter().map(|m| m * m).sum::<f64>());
    }
    let mut out = Tensor::identity(k);
    out.data_mut().iter_mut().for_each(|x| *x *= scale);
    let mut store = ParamStore::new();
    store.insert("gen.conv.w", GEN_GROUP, w);
    store.insert("gen.conv.b", GEN_GROUP, b);
    store.insert("gen.out.w", GEN_GROUP, out);
    store.insert_zeros("gen.out.b", GEN_GROUP, 1, k);
    (store, cfg)
}

/// Registers generator (`gen.*`) and auxiliary head (`aux.*`) parameters.
/// The auxiliary head is marked non-exported: it only serves training.
pub fn init_generator(
    store: &mut ParamStore,
    cfg: &GeneratorConfig,
    feature_dim: usize,
    num_phonemes: usize,
    k_clusters: usize,
    rng: &mut impl Rng,
) {
    let fan_in = cfg.width * feature_dim;
    store.insert_normal("gen.conv.w", GEN_GROUP, fan_in, cfg.hidden, (1.0 / fan_in as f64).sqrt(), rng);
    store.insert_zeros("gen.conv.b", GEN_GROUP, 1, cfg.hidden);
    crate::numerics::nn::init_linear(store, "gen.out", GEN_GROUP, cfg.hidden, num_phonemes, rng);
    crate::numerics::nn::init_linear(store, "aux.out", AUX_GROUP, cfg.hidden, k_clusters, rng);
    store.set_exported_group(AUX_GROUP, false);
}

pub fn init_discriminator(store: &mut ParamStore, cfg: &DiscriminatorConfig, num_phonemes: usize, rng: &mut impl Rng) {
    let f1 = cfg.width * num_phonemes;
    store.insert_normal("disc.c1.w", DISC_GROUP, f1, cfg.hidden, (1.0 / f1 as f64).sqrt(), rng);
    store.insert_zeros("disc.c1.b", DISC_GROUP, 1, cfg.hidden);
    let f2 = cfg.width * cfg.hidden;
    store.insert_normal("disc.c2.w", DISC_GROUP, f2, 1, (1.0 / f2 as f64).sqrt(), rng);
    store.insert_zeros("disc.c2.b", DISC_GROUP, 1, 1);
}

/// Generator activations for one utterance.
pub struct GeneratorOutput {
    /// `T' x H` features shared by both heads.
    pub hidden: Var,
    /// `T' x K_p` phoneme scores.
    pub logits: Var,
}

pub fn generator_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GeneratorConfig,
    features: &Tensor,
) -> Result<GeneratorOutput, BridgeError> {
    if features.rows() < cfg.receptive_field() {
        return Err(BridgeError::TooShort { frames: features.rows(), required: cfg.receptive_field() });
    }
    let x = g.constant(features.clone());
    let w = g.param(store, "gen.conv.w");
    let b = g.param(store, "gen.conv.b");
    let h = conv1d(g, x, w, b, cfg.conv())?;
    let hidden = g.leaky_relu(h, cfg.leaky_slope);
    let logits = crate::numerics::nn::linear(g, store, "gen.out", hidden);
    Ok(GeneratorOutput { hidden, logits })
}

/// Auxiliary cluster scores from generator features.
pub fn aux_logits(g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
    crate::numerics::nn::linear(g, store, "aux.out", hidden)
}

/// Runs the generator and normalizes its output into a lattice.
pub fn generate(store: &ParamStore, cfg: &GeneratorConfig, features: &Tensor) -> Result<PhonemeLattice, BridgeError> {
    let mut g = Graph::new();
    let out = generator_forward(&mut g, store, cfg, features)?;
    let logits = g.value(out.logits);
    let map = stride_map(features.rows(), logits.rows())?;
    PhonemeLattice::from_logits(logits, map)
}

/// Critic score (a `1 x 1` node) of an `L x K_p` phoneme distribution
/// sequence. `C = sigmoid(score)`.
pub fn discriminator_score(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DiscriminatorConfig,
    seq: Var,
) -> Result<Var, BridgeError> {
    let spec = ConvSpec { width: cfg.width, stride: 1, padding: cfg.width / 2 };
    let (w1, b1) = (g.param(store, "disc.c1.w"), g.param(store, "disc.c1.b"));
    let h = conv1d(g, seq, w1, b1, spec)?;
    let h = g.leaky_relu(h, cfg.leaky_slope);
    let (w2, b2) = (g.param(store, "disc.c2.w"), g.param(store, "disc.c2.b"));
    let s = conv1d(g, h, w2, b2, spec)?;
    Ok(g.mean(s))
}

/// Maximal runs of equal argmax, as half-open step ranges.
pub fn argmax_runs(probs: &Tensor) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=probs.rows() {
        if t == probs.rows() || probs.argmax_row(t) != probs.argmax_row(start) {
            runs.push((start, t));
            start = t;
        }
    }
    runs
}

/// Averages the rows of each run: `R x T` averaging matrix times `probs`.
/// Run boundaries are treated as constants.
pub fn segment_average(g: &mut Graph, probs: Var) -> Var {
    let runs = argmax_runs(g.value(probs));
    let t = g.value(probs).rows();
    let mut avg = Tensor::zeros(runs.len(), t);
    for (r, &(s, e)) in runs.iter().enumerate() {
        for c in s..e {
            avg.set(r, c, 1.0 / (e - s) as f64);
        }
    }
    let a = g.constant(avg);
    g.matmul(a, probs)
}

/// `L x K` one-hot encoding of a phoneme string.
pub fn one_hot_rows(phonemes: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(phonemes.len(), k);
    for (i, &p) in phonemes.iter().enumerate() {
        t.set(i, p, 1.0);
    }
    t
}
