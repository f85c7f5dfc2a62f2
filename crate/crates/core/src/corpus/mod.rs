//! Procedurally generated phonetic language and the labeled corpus drawn
//! from it.

pub mod features;
pub mod generate;
pub mod io;
pub mod language;

pub use features::{synthesize_features, AcousticSequence, DEFAULT_FRAME_RATE};
pub use generate::{
    derive_seed, generate_corpus, sample_sentence, tag_spans, CorpusBundle, CorpusCounts, QaExample, SlotTag,
    Split, Utterance,
};
pub use io::{load_corpus, save_corpus};
pub use language::{build_language, LanguageSizes, LanguageSpec, TemplateItem};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot construct language: {0}")]
    Construction(String),
    #[error("invalid language: {0}")]
    InvalidLanguage(String),
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),
    #[error("phoneme {0} is outside the inventory")]
    UnknownPhoneme(usize),
    #[error("invalid corpus counts: {0}")]
    InvalidCounts(String),
    #[error("corpus format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
