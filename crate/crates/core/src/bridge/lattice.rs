//! Per-step phoneme distributions emitted by the generator.

use serde::{Deserialize, Serialize};

use super::BridgeError;
use crate::numerics::tensor::{log_softmax_rows, log_sum_exp};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeLattice {
    /// `T' x K_p` log-probabilities; entries may be `-inf` (probability 0).
    pub log_probs: Tensor,
    /// Half-open input frame span `[start, end)` owned by each step.
    pub stride_map: Vec<(usize, usize)>,
}

/// Partitions `frames` input frames into `steps` contiguous spans, step `i`
/// owning `[floor(i T / T'), floor((i + 1) T / T'))`.
///
/// When `T` is a multiple of `T'` this is exactly the stride grid.
pub fn stride_map(frames: usize, steps: usize) -> Result<Vec<(usize, usize)>, BridgeError> {
    if steps == 0 || steps > frames {
        return Err(BridgeError::Shape(format!("cannot map {steps} steps onto {frames} frames")));
    }
    Ok((0..steps).map(|i| (i * frames / steps, (i + 1) * frames / steps)).collect())
}

impl PhonemeLattice {
    pub fn new(log_probs: Tensor, stride_map: Vec<(usize, usize)>) -> Result<Self, BridgeError> {
        let lattice = Self { log_probs, stride_map };
        lattice.validate()?;
        Ok(lattice)
    }

    /// Normalizes raw scores with a row-wise log-softmax.
    pub fn from_logits(logits: &Tensor, stride_map: Vec<(usize, usize)>) -> Result<Self, BridgeError> {
        Self::new(log_softmax_rows(logits), stride_map)
    }

    /// Lattice putting all mass on `phonemes[t]` at step `t`.
    pub fn one_hot(phonemes: &[usize], num_phonemes: usize, stride_map: Vec<(usize, usize)>) -> Result<Self, BridgeError> {
        let mut lp = Tensor::full(phonemes.len(), num_phonemes, f64::NEG_INFINITY);
        for (t, &p) in phonemes.iter().enumerate() {
            if p >= num_phonemes {
                return Err(BridgeError::Shape(format!("phoneme {p} outside inventory of {num_phonemes}")));
            }
            lp.set(t, p, 0.0);
        }
        Self::new(lp, stride_map)
    }

    /// Frame-rate oracle lattice for a gold frame transcription.
    pub fn oracle(frame_phonemes: &[usize], num_phonemes: usize) -> Result<Self, BridgeError> {
        let n = frame_phonemes.len();
        Self::one_hot(frame_phonemes, num_phonemes, stride_map(n, n)?)
    }

    pub fn steps(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn num_phonemes(&self) -> usize {
        self.log_probs.cols()
    }

    /// Number of input frames covered.
    pub fn frames(&self) -> usize {
        self.stride_map.last().map_or(0, |s| s.1)
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        let steps = self.steps();
        if steps == 0 {
            return Err(BridgeError::Shape("empty lattice".into()));
        }
        if self.stride_map.len() != steps {
            return Err(BridgeError::Shape(format!("{} spans for {steps} steps", self.stride_map.len())));
        }
        let mut expected = 0;
        for &(s, e) in &self.stride_map {
            if s != expected || e <= s {
                return Err(BridgeError::Shape("stride map must tile the frames contiguously".into()));
            }
            expected = e;
        }
        for t in 0..steps {
            let row = self.log_probs.row_slice(t);
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(BridgeError::NonFinite(format!("lattice step {t}")));
            }
            let lse = log_sum_exp(row);
            if lse.abs() > 1e-5 {
                return Err(BridgeError::Shape(format!("step {t} log-sum-exp is {lse}")));
            }
        }
        Ok(())
    }

    /// Most probable phoneme at every step.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.steps()).map(|t| self.log_probs.argmax_row(t)).collect()
    }

    /// Projects a per-step value onto input frames.
    pub fn to_frames<T: Clone>(&self, per_step: &[T]) -> Vec<T> {
        self.stride_map
            .iter()
            .zip(per_step)
            .flat_map(|(&(s, e), v)| std::iter::repeat_n(v.clone(), e - s))
            .collect()
    }
}

/// Fraction of frames whose argmax phoneme differs from the gold frame phoneme.
pub fn frame_error_rate(lattice: &PhonemeLattice, gold_frames: &[usize]) -> Result<(usize, usize), BridgeError> {
    let predicted = lattice.to_frames(&lattice.argmax());
    if predicted.len() != gold_frames.len() {
        return Err(BridgeError::Shape(format!(
            "lattice covers {} frames, gold has {}",
            predicted.len(),
            gold_frames.len()
        )));
    }
    let errors = predicted.iter().zip(gold_frames).filter(|(a, b)| a != b).count();
    Ok((errors, gold_frames.len()))
}
