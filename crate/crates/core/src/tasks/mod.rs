//! Downstream heads, metrics and finetuning.

pub mod finetune;
pub mod heads;
pub mod metrics;

pub use finetune::{attach_head, evaluate, finetune, pooled_embeddings, score, EvalReport, FinetuneConfig, Prediction, Task};
pub use heads::TagVocab;
pub use metrics::{accuracy, best_span, edit_distance, ff1_aos, slot_f1, wer, F1Counts, Span};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("empty reference")]
    EmptyReference,
    #[error("utterance lacks a {0} label")]
    MissingLabel(&'static str),
    #[error("no decodable tokens")]
    EmptyDecode,
    #[error("no usable training examples")]
    NoExamples,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}
