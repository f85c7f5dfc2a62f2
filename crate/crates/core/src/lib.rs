//! Unsupervised semantic augmentation of frozen acoustic speech embeddings.
//!
//! The pipeline runs on a procedurally generated phonetic language:
//! simulated acoustic features are transcribed into phonemes by a GAN-trained
//! convolutional generator, decoded into subwords with a lexicon transducer,
//! embedded by a small denoising sequence model, and fused back with the
//! acoustic features for downstream intent classification, slot tagging and
//! spoken question answering.

pub mod bridge;
pub mod corpus;
pub mod fusion;
pub mod lm;
pub mod numerics;
pub mod tasks;
pub mod wfst;
