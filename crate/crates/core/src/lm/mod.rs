//! Denoising encoder-decoder language model over the subword inventory,
//! bottleneck adapters, and frame-rate upsampling of its embeddings.

pub mod model;
pub mod pretrain;
pub mod upsample;

pub use model::{
    add_adapters, adapter_param_delta, encode, encode_graph, init_lm, AdapterConfig, LmConfig, SemanticSequence, Vocab,
    ADAPTER_GROUP, LM_GROUP,
};
pub use pretrain::{corrupt, pretrain_lm, unigram_perplexity, DenoiseConfig, EpochLog, LmRun};
pub use upsample::{upsample, upsample_indices};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("token {token} outside vocabulary of {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds {max} positions")]
    TooLong { len: usize, max: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}
