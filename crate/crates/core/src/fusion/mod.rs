//! Combining acoustic and semantic embeddings, and the model variants built
//! from them.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::model::{generate, GeneratorConfig};
use crate::bridge::BridgeError;
use crate::lm::{encode_graph, upsample_indices, LmConfig, LmError, Vocab, ADAPTER_GROUP};
use crate::numerics::nn::{attention_params, init_attention, multihead_attention};
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use crate::wfst::{decode, Collapse, DecodeResult, Transducer, WfstError};

pub const FUSION_GROUP: &str = "fusion";
pub const HEAD_GROUP: &str = "head";

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("frame count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("variant {variant} requires {component}")]
    MissingComponent { variant: Variant, component: &'static str },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Wfst(#[from] WfstError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AcousticOnly,
    SspBase,
    SspPlusR,
    SspPlusRa,
    SspPlusAp,
    SspTune,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::AcousticOnly, Variant::SspBase, Variant::SspPlusR, Variant::SspPlusRa, Variant::SspPlusAp, Variant::SspTune];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AcousticOnly => "acoustic_only",
            Variant::SspBase => "ssp_base",
            Variant::SspPlusR => "ssp_plus_r",
            Variant::SspPlusRa => "ssp_plus_ra",
            Variant::SspPlusAp => "ssp_plus_ap",
            Variant::SspTune => "ssp_tune",
        }
    }

    pub fn uses_semantics(self) -> bool {
        self != Variant::AcousticOnly
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::SspPlusRa | Variant::SspTune)
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Variant::SspPlusAp | Variant::SspTune)
    }

    /// Parameter groups updated during downstream training.
    pub fn registry(self) -> Vec<&'static str> {
        let mut groups = vec![HEAD_GROUP];
        if self.uses_attention() {
            groups.push(FUSION_GROUP);
        }
        if self.uses_adapters() {
            groups.push(ADAPTER_GROUP);
        }
        groups
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub variant: Variant,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { variant: Variant::SspTune, heads: 4 }
    }
}

/// `[z_e | z_m]` row by row.
pub fn fuse_concat(z_e: &Tensor, z_m: &Tensor) -> Result<Tensor, FusionError> {
    if z_e.rows() != z_m.rows() {
        return Err(FusionError::LengthMismatch(z_e.rows(), z_m.rows()));
    }
    let mut g = Graph::new();
    let a = g.constant(z_e.clone());
    let b = g.constant(z_m.clone());
    let out = g.concat_cols(&[a, b]);
    Ok(g.value(out).clone())
}

/// Registers the cross-attention projections. The output projection starts
/// at zero so the branch initially contributes nothing.
pub fn init_fusion_attention(store: &mut ParamStore, d_acoustic: usize, d_semantic: usize, rng: &mut impl Rng) {
    init_attention(store, "fusion.att", FUSION_GROUP, d_acoustic, d_semantic, d_acoustic, true, rng);
}

/// `[z_e | MHA(z_e, z_m, z_m)]`, `T x 2D`. With no semantic rows the
/// attention half is zero and the flag is set.
pub fn fuse_attention(
    g: &mut Graph,
    store: &ParamStore,
    heads: usize,
    z_e: Var,
    z_m: Option<Var>,
) -> Result<(Var, bool), FusionError> {
    let (t, d) = (g.value(z_e).rows(), g.value(z_e).cols());
    let readout = match z_m.filter(|&m| g.value(m).rows() > 0) {
        Some(m) => {
            let p = attention_params(g, store, "fusion.att", heads);
            multihead_attention(g, z_e, m, &p, None)?.output
        }
        None => {
            let z = g.constant(Tensor::zeros(t, d));
            return Ok((g.concat_cols(&[z_e, z]), true));
        }
    };
    Ok((g.concat_cols(&[z_e, readout]), false))
}

/// Frozen upstream pieces shared by all variants.
#[derive(Clone)]
pub struct Components {
    pub feature_dim: usize,
    pub generator: Option<(ParamStore, GeneratorConfig)>,
    pub lexicon: Option<Transducer>,
    pub collapse: Collapse,
    /// Pretrained model; may already carry adapters.
    pub lm: Option<(ParamStore, LmConfig, Vocab)>,
}

/// Per-utterance results of the frozen part of the pipeline.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: Tensor,
    pub decoded: Option<DecodeResult>,
    /// Encoder output when the encoder is frozen.
    pub semantic: Option<Tensor>,
}

impl Prepared {
    pub fn tokens(&self) -> &[usize] {
        self.decoded.as_ref().map_or(&[], |d| d.subwords.as_slice())
    }
}

pub struct AssembledModel {
    pub variant: Variant,
    pub heads: usize,
    pub feature_dim: usize,
    generator: Option<(ParamStore, GeneratorConfig)>,
    lexicon: Option<Transducer>,
    collapse: Collapse,
    lm_cfg: Option<(LmConfig, Vocab)>,
    /// LM, adapter, fusion and (once attached) head parameters.
    pub store: ParamStore,
}

pub fn assemble_model(cfg: &FusionConfig, components: Components, rng: &mut impl Rng) -> Result<AssembledModel, FusionError> {
    let v = cfg.variant;
    let missing = |component| FusionError::MissingComponent { variant: v, component };
    let mut store = ParamStore::new();
    let mut lm_cfg = None;
    if v.uses_semantics() {
        if components.generator.is_none() {
            return Err(missing("a bridge generator"));
        }
        if components.lexicon.is_none() {
            return Err(missing("a lexicon transducer"));
        }
        let (lm, c, vocab) = components.lm.ok_or_else(|| missing("a pretrained language model"))?;
        let has_adapters = lm.iter().any(|p| p.group == ADAPTER_GROUP);
        if v.uses_adapters() && !has_adapters {
            return Err(missing("adapters"));
        }
        // Variants without adapters run the plain encoder.
        store.merge(if v.uses_adapters() { lm } else { lm.subset(crate::lm::LM_GROUP) });
        lm_cfg = Some((c, vocab));
        if v.uses_attention() {
            init_fusion_attention(&mut store, components.feature_dim, c.d_model, rng);
        }
    }
    store.set_trainable_groups(&v.registry());
    Ok(AssembledModel {
        variant: v,
        heads: cfg.heads,
        feature_dim: components.feature_dim,
        generator: components.generator,
        lexicon: components.lexicon,
        collapse: components.collapse,
        lm_cfg,
        store,
    })
}

impl AssembledModel {
    /// Width of the per-frame fused representation.
    pub fn width(&self) -> usize {
        let d = self.feature_dim;
        let dm = self.lm_cfg.map_or(0, |(c, _)| c.d_model);
        match self.variant {
            Variant::AcousticOnly => d,
            Variant::SspBase | Variant::SspPlusAp => dm,
            Variant::SspPlusR => d + dm,
            Variant::SspPlusRa | Variant::SspTune => 2 * d,
        }
    }

    /// Frozen parameters living outside `store` (the bridge generator).
    pub fn upstream_param_count(&self) -> usize {
        self.generator.as_ref().map_or(0, |(s, _)| s.count())
    }

    pub fn semantic_width(&self) -> usize {
        self.lm_cfg.map_or(0, |(c, _)| c.d_model)
    }

    /// Makes the registry groups trainable and everything else frozen.
    pub fn apply_registry(&mut self) {
        self.store.set_trainable_groups(&self.variant.registry());
    }

    /// Transcribes `features` and caches everything that does not depend on
    /// trainable parameters.
    pub fn prepare(&self, features: &Tensor) -> Result<Prepared, FusionError> {
        if !self.variant.uses_semantics() {
            return Ok(Prepared { features: features.clone(), decoded: None, semantic: None });
        }
        let (gen, gcfg) = self.generator.as_ref().expect("checked at assembly");
        let lattice = generate(gen, gcfg, features)?;
        let decoded = decode(&lattice, self.lexicon.as_ref().expect("checked at assembly"), self.collapse)?;
        let (lcfg, vocab) = self.lm_cfg.expect("checked at assembly");
        let tokens = decoded.subwords.iter().copied().take(lcfg.max_len).collect::<Vec<_>>();
        let semantic = if self.variant.uses_adapters() || tokens.is_empty() {
            None
        } else {
            let mut g = Graph::new();
            let z = encode_graph(&mut g, &self.store, &lcfg, vocab, &tokens)?;
            Some(g.value(z).clone())
        };
        Ok(Prepared { features: features.clone(), decoded: Some(decoded), semantic })
    }

    /// Token-rate semantic embeddings (`L x D_m`), or `None` when the decode
    /// produced no tokens.
    pub fn semantic(&self, g: &mut Graph, p: &Prepared) -> Result<Option<Var>, FusionError> {
        if let Some(z) = &p.semantic {
            return Ok(Some(g.constant(z.clone())));
        }
        let (lcfg, vocab) = self.lm_cfg.ok_or(FusionError::MissingComponent {
            variant: self.variant,
            component: "a pretrained language model",
        })?;
        let tokens: Vec<usize> = p.tokens().iter().copied().take(lcfg.max_len).collect();
        if tokens.is_empty() {
            return Ok(None);
        }
        Ok(Some(encode_graph(g, &self.store, &lcfg, vocab, &tokens)?))
    }

    fn upsampled(&self, g: &mut Graph, p: &Prepared, frames: usize) -> Result<Var, FusionError> {
        let z = self.semantic(g, p)?;
        let d = self.semantic_width();
        let Some(z) = z else {
            return Ok(g.constant(Tensor::zeros(frames, d)));
        };
        let decoded = p.decoded.as_ref().expect("semantic variants decode");
        let rows = g.value(z).rows();
        // Tokens beyond the model's length limit fall back to the last row.
        let alignment: Vec<Option<usize>> =
            decoded.frame_alignment.iter().map(|a| a.map(|i| i.min(rows - 1))).collect();
        let idx = upsample_indices(rows, Some(&alignment), frames)?.expect("nonempty");
        Ok(g.gather_rows(z, Rc::new(idx)))
    }

    /// Per-frame fused representation, `T x width()`.
    pub fn forward(&self, g: &mut Graph, p: &Prepared) -> Result<Var, FusionError> {
        let frames = p.features.rows();
        let z_e = g.constant(p.features.clone());
        Ok(match self.variant {
            Variant::AcousticOnly => z_e,
            Variant::SspBase | Variant::SspPlusAp => self.upsampled(g, p, frames)?,
            Variant::SspPlusR => {
                let u = self.upsampled(g, p, frames)?;
                g.concat_cols(&[z_e, u])
            }
            Variant::SspPlusRa | Variant::SspTune => {
                let z = self.semantic(g, p)?;
                fuse_attention(g, &self.store, self.heads, z_e, z)?.0
            }
        })
    }
}
