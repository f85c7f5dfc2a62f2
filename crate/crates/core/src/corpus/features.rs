//! Simulated frozen-encoder features: one fixed prototype per phoneme, a
//! random duration per phoneme, and Gaussian jitter on every frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::language::LanguageSpec;
use super::CorpusError;
use crate::numerics::Tensor;

/// Frames per synthetic second.
pub const DEFAULT_FRAME_RATE: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticSequence {
    /// `T x D`, values representable as `f32`.
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl AcousticSequence {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self, CorpusError> {
        if frames.rows() == 0 {
            return Err(CorpusError::InvalidFeatures("empty acoustic sequence".into()));
        }
        if !frames.is_finite() {
            return Err(CorpusError::InvalidFeatures("non-finite acoustic frame".into()));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Synthesizes features for `phonemes`. Returns the features and, for every
/// frame, the position in `phonemes` that generated it.
pub fn synthesize_features(
    phonemes: &[usize],
    spec: &LanguageSpec,
    noise_std: f64,
    seed: u64,
) -> Result<(AcousticSequence, Vec<usize>), CorpusError> {
    if phonemes.is_empty() {
        return Err(CorpusError::InvalidFeatures("empty phoneme sequence".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(CorpusError::InvalidFeatures(format!("noise_std must be >= 0, got {noise_std}")));
    }
    if let Some(&p) = phonemes.iter().find(|&&p| p >= spec.num_phonemes()) {
        return Err(CorpusError::UnknownPhoneme(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (spec.sizes.min_duration, spec.sizes.max_duration);
    let durations: Vec<usize> = phonemes.iter().map(|_| rng.random_range(lo..=hi)).collect();
    let total: usize = durations.iter().sum();
    let d = spec.feature_dim();
    let jitter = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("valid std"));
    let mut data = Vec::with_capacity(total * d);
    let mut alignment = Vec::with_capacity(total);
    for (pos, (&p, &dur)) in phonemes.iter().zip(&durations).enumerate() {
        for _ in 0..dur {
            for &mu in &spec.prototypes[p] {
                let noise = jitter.map_or(0.0, |j| j.sample(&mut rng));
                data.push((mu + noise) as f32 as f64);
            }
            alignment.push(pos);
        }
    }
    let seq = AcousticSequence::new(Tensor::from_rows(total, d, data), DEFAULT_FRAME_RATE)?;
    Ok((seq, alignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::language::{build_language, LanguageSizes};

    fn spec_with_durations(lo: usize, hi: usize) -> LanguageSpec {
        let sizes = LanguageSizes { min_duration: lo, max_duration: hi, ..LanguageSizes::default() };
        build_language(5, sizes).unwrap()
    }

    #[test]
    fn noiseless_single_phoneme() {
        let spec = spec_with_durations(3, 3);
        let (seq, align) = synthesize_features(&[2], &spec, 0.0, 1).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(align, vec![0, 0, 0]);
        for r in 0..3 {
            let proto: Vec<f64> = spec.prototypes[2].clone();
            assert_eq!(seq.frames.row_slice(r), proto.as_slice());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = spec_with_durations(2, 5);
        let a = synthesize_features(&[0, 1, 2, 3], &spec, 0.1, 9).unwrap();
        let b = synthesize_features(&[0, 1, 2, 3], &spec, 0.1, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_phoneme_rejected() {
        let spec = spec_with_durations(2, 5);
        assert!(matches!(synthesize_features(&[99], &spec, 0.1, 0), Err(CorpusError::UnknownPhoneme(99))));
        assert!(synthesize_features(&[], &spec, 0.1, 0).is_err());
        assert!(synthesize_features(&[0], &spec, -1.0, 0).is_err());
    }

    #[test]
    fn sample_mean_converges_to_prototype() {
        let spec = spec_with_durations(5, 5);
        let sigma = 0.1;
        let phonemes = vec![1; 2000];
        let (seq, _) = synthesize_features(&phonemes, &spec, sigma, 4).unwrap();
        let n = seq.len() as f64;
        assert_eq!(seq.len(), 10_000);
        for c in 0..spec.feature_dim() {
            let mean = (0..seq.len()).map(|r| seq.frames.get(r, c)).sum::<f64>() / n;
            assert!((mean - spec.prototypes[1][c]).abs() <= 4.0 * sigma / n.sqrt());
        }
    }

    #[test]
    fn prototypes_are_separated() {
        let spec = spec_with_durations(2, 5);
        for i in 0..spec.num_phonemes() {
            for j in i + 1..spec.num_phonemes() {
                let d: f64 = spec.prototypes[i]
                    .iter()
                    .zip(&spec.prototypes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d > 0.0);
            }
        }
    }
}
