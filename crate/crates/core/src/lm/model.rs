//! Pre-LN transformer encoder-decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LmError;
use crate::numerics::nn::{
    attention_params, causal_mask, init_attention, init_layer_norm, init_linear, layer_norm_named, linear,
    multihead_attention,
};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const LM_GROUP: &str = "lm";
pub const ADAPTER_GROUP: &str = "adapter";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, encoder_layers: 2, decoder_layers: 2, ff_dim: 128, max_len: 128 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(LmError::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.ff_dim == 0 || self.max_len < 2 {
            return Err(LmError::Config("ff_dim must be >= 1 and max_len >= 2".into()));
        }
        Ok(())
    }
}

/// Subword ids followed by the three special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub subwords: usize,
}

impl Vocab {
    pub fn mask(&self) -> usize {
        self.subwords
    }

    pub fn bos(&self) -> usize {
        self.subwords + 1
    }

    pub fn eos(&self) -> usize {
        self.subwords + 2
    }

    pub fn size(&self) -> usize {
        self.subwords + 3
    }

    pub fn check(&self, tokens: &[usize]) -> Result<(), LmError> {
        match tokens.iter().find(|&&t| t >= self.size()) {
            Some(&token) => Err(LmError::OutOfVocabulary { token, vocab: self.size() }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub bottleneck: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { bottleneck: 8 }
    }
}

/// Encoder output: one row per input token.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSequence {
    pub embeddings: Tensor,
    pub token_ids: Vec<usize>,
}

fn init_ff(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut impl Rng) {
    init_linear(store, &format!("{name}.ff1"), LM_GROUP, d, ff, rng);
    init_linear(store, &format!("{name}.ff2"), LM_GROUP, ff, d, rng);
}

pub fn init_lm(cfg: &LmConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<ParamStore, LmError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut s = ParamStore::new();
    s.insert_normal("lm.embed", LM_GROUP, vocab.size(), d, 0.1, rng);
    s.insert_normal("lm.pos", LM_GROUP, cfg.max_len, d, 0.1, rng);
    for l in 0..cfg.encoder_layers {
        let n = format!("lm.enc.{l}");
        init_layer_norm(&mut s, &format!("{n}.ln1"), LM_GROUP, d);
        init_attention(&mut s, &format!("{n}.att"), LM_GROUP, d, d, d, false, rng);
        init_layer_norm(&mut s, &format!("{n}.ln2"), LM_GROUP, d);
        init_ff(&mut s, &n, d, cfg.ff_dim, rng);
    }
    init_layer_norm(&mut s, "lm.enc.ln", LM_GROUP, d);
    for l in 0..cfg.decoder_layers {
        let n = format!("lm.dec.{l}");
        init_layer_norm(&mut s, &format!("{n}.ln1"), LM_GROUP, d);
        init_attention(&mut s, &format!("{n}.self"), LM_GROUP, d, d, d, false, rng);
        init_layer_norm(&mut s, &format!("{n}.ln2"), LM_GROUP, d);
        init_attention(&mut s, &format!("{n}.cross"), LM_GROUP, d, d, d, false, rng);
        init_layer_norm(&mut s, &format!("{n}.ln3"), LM_GROUP, d);
        init_ff(&mut s, &n, d, cfg.ff_dim, rng);
    }
    init_layer_norm(&mut s, "lm.dec.ln", LM_GROUP, d);
    init_linear(&mut s, "lm.out", LM_GROUP, d, vocab.size(), rng);
    Ok(s)
}

/// Inserts an adapter after every encoder feed-forward sublayer, freezes the
/// base model and leaves only the adapters trainable.
pub fn add_adapters(store: &mut ParamStore, cfg: &LmConfig, adapter: &AdapterConfig, rng: &mut impl Rng) -> Result<(), LmError> {
    if adapter.bottleneck == 0 {
        return Err(LmError::Config("adapter bottleneck must be >= 1".into()));
    }
    let d = cfg.d_model;
    for l in 0..cfg.encoder_layers {
        let n = format!("lm.enc.{l}.adapter");
        init_layer_norm(store, &format!("{n}.ln"), ADAPTER_GROUP, d);
        init_linear(store, &format!("{n}.down"), ADAPTER_GROUP, d, adapter.bottleneck, rng);
        store.insert_zeros(&format!("{n}.up.w"), ADAPTER_GROUP, adapter.bottleneck, d);
        store.insert_zeros(&format!("{n}.up.b"), ADAPTER_GROUP, 1, d);
    }
    store.set_trainable_groups(&[ADAPTER_GROUP]);
    Ok(())
}

/// Parameters added by [`add_adapters`].
pub fn adapter_param_delta(cfg: &LmConfig, bottleneck: usize) -> usize {
    let d = cfg.d_model;
    cfg.encoder_layers * (2 * d * bottleneck + bottleneck + d + 2 * d)
}

fn embed(g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Var {
    let table = g.param(store, "lm.embed");
    let e = g.gather_rows(table, std::rc::Rc::new(tokens.to_vec()));
    let pos = g.param(store, "lm.pos");
    let p = g.slice_rows(pos, 0, tokens.len());
    g.add(e, p)
}

fn feed_forward(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let h = linear(g, store, &format!("{name}.ff1"), x);
    let h = g.relu(h);
    linear(g, store, &format!("{name}.ff2"), h)
}

fn residual(g: &mut Graph, x: Var, f: Var) -> Var {
    g.add(x, f)
}

/// Encoder stack on a graph; adapters are applied when present in `store`.
pub fn encode_graph(g: &mut Graph, store: &ParamStore, cfg: &LmConfig, vocab: Vocab, tokens: &[usize]) -> Result<Var, LmError> {
    vocab.check(tokens)?;
    if tokens.is_empty() || tokens.len() > cfg.max_len {
        return Err(LmError::TooLong { len: tokens.len(), max: cfg.max_len });
    }
    let mut x = embed(g, store, tokens);
    for l in 0..cfg.encoder_layers {
        let n = format!("lm.enc.{l}");
        let h = layer_norm_named(g, store, &format!("{n}.ln1"), x);
        let p = attention_params(g, store, &format!("{n}.att"), cfg.heads);
        let a = multihead_attention(g, h, h, &p, None)?.output;
        x = residual(g, x, a);
        let h = layer_norm_named(g, store, &format!("{n}.ln2"), x);
        let f = feed_forward(g, store, &n, h);
        x = residual(g, x, f);
        let ad = format!("{n}.adapter");
        if store.get(&format!("{ad}.up.w")).is_some() {
            let h = layer_norm_named(g, store, &format!("{ad}.ln"), x);
            let h = linear(g, store, &format!("{ad}.down"), h);
            let h = g.relu(h);
            let h = linear(g, store, &format!("{ad}.up"), h);
            x = residual(g, x, h);
        }
    }
    Ok(layer_norm_named(g, store, "lm.enc.ln", x))
}

/// Decoder logits (`L x V`) for teacher-forced `inputs` attending to `memory`.
pub fn decode_graph(g: &mut Graph, store: &ParamStore, cfg: &LmConfig, memory: Var, inputs: &[usize]) -> Result<Var, LmError> {
    if inputs.len() > cfg.max_len {
        return Err(LmError::TooLong { len: inputs.len(), max: cfg.max_len });
    }
    let mask = causal_mask(inputs.len());
    let mut x = embed(g, store, inputs);
    for l in 0..cfg.decoder_layers {
        let n = format!("lm.dec.{l}");
        let h = layer_norm_named(g, store, &format!("{n}.ln1"), x);
        let p = attention_params(g, store, &format!("{n}.self"), cfg.heads);
        let a = multihead_attention(g, h, h, &p, Some(&mask))?.output;
        x = residual(g, x, a);
        let h = layer_norm_named(g, store, &format!("{n}.ln2"), x);
        let p = attention_params(g, store, &format!("{n}.cross"), cfg.heads);
        let a = multihead_attention(g, h, memory, &p, None)?.output;
        x = residual(g, x, a);
        let h = layer_norm_named(g, store, &format!("{n}.ln3"), x);
        let f = feed_forward(g, store, &n, h);
        x = residual(g, x, f);
    }
    let h = layer_norm_named(g, store, "lm.dec.ln", x);
    Ok(linear(g, store, "lm.out", h))
}

/// Semantic embeddings of `tokens` from the final encoder layer.
pub fn encode(store: &ParamStore, cfg: &LmConfig, vocab: Vocab, tokens: &[usize]) -> Result<SemanticSequence, LmError> {
    let mut g = Graph::new();
    let out = encode_graph(&mut g, store, cfg, vocab, tokens)?;
    Ok(SemanticSequence { embeddings: g.value(out).clone(), token_ids: tokens.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, LmConfig, Vocab) {
        let cfg = LmConfig::default();
        let vocab = Vocab { subwords: 20 };
        (init_lm(&cfg, vocab, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), cfg, vocab)
    }

    #[test]
    fn one_row_per_token() {
        let (s, cfg, v) = setup();
        let out = encode(&s, &cfg, v, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(out.embeddings.shape(), &[5, 64]);
        assert!(out.embeddings.is_finite());
    }

    #[test]
    fn out_of_vocabulary() {
        let (s, cfg, v) = setup();
        assert!(matches!(encode(&s, &cfg, v, &[2, 23]), Err(LmError::OutOfVocabulary { token: 23, .. })));
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let (s, cfg, v) = setup();
        let a = encode(&s, &cfg, v, &[3, 7, 9]).unwrap().embeddings;
        let b = encode(&s, &cfg, v, &[7, 3, 9]).unwrap().embeddings;
        for r in 0..3 {
            let diff: f64 = a.row_slice(r).iter().zip(b.row_slice(r)).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 0.0, "row {r} unchanged");
        }
    }

    #[test]
    fn zero_adapters_are_identity() {
        let (mut s, cfg, v) = setup();
        let tokens = [0, 5, 19, 2];
        let before = encode(&s, &cfg, v, &tokens).unwrap().embeddings;
        add_adapters(&mut s, &cfg, &AdapterConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let after = encode(&s, &cfg, v, &tokens).unwrap().embeddings;
        let dev = before.data().iter().zip(after.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-6);
    }

    #[test]
    fn adapter_count_and_freezing() {
        let (mut s, cfg, _) = setup();
        let base = s.count();
        add_adapters(&mut s, &cfg, &AdapterConfig { bottleneck: 8 }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // 2 layers x (2*64*8 + 8 + 64 + 128)
        assert_eq!(adapter_param_delta(&cfg, 8), 2 * (1024 + 8 + 64 + 128));
        assert_eq!(s.count() - base, adapter_param_delta(&cfg, 8));
        assert_eq!(s.trainable_count(), adapter_param_delta(&cfg, 8));
        assert!(s.iter().filter(|p| p.group == LM_GROUP).all(|p| p.frozen));
    }

    #[test]
    fn decoder_is_causal() {
        let (s, cfg, v) = setup();
        let run = |inputs: &[usize]| {
            let mut g = Graph::new();
            let m = encode_graph(&mut g, &s, &cfg, v, &[1, 2, 3]).unwrap();
            let out = decode_graph(&mut g, &s, &cfg, m, inputs).unwrap();
            g.value(out).clone()
        };
        let a = run(&[v.bos(), 4, 6]);
        let b = run(&[v.bos(), 4, 11]);
        for c in 0..v.size() {
            assert!((a.get(1, c) - b.get(1, c)).abs() < 1e-12);
        }
        assert!((0..v.size()).any(|c| (a.get(2, c) - b.get(2, c)).abs() > 1e-9));
    }
}
