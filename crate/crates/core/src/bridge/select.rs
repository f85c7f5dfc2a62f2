//! Label-free checkpoint selection. A generator snapshot is scored by how
//! plausible its collapsed transcriptions look under a phoneme bigram model
//! of the unpaired text, penalized when it uses few distinct phonemes.

use super::model::generate;
use super::BridgeError;
use crate::numerics::{ParamStore, Tensor};
use super::model::GeneratorConfig;

/// Add-one smoothed bigram model; index `k` is the sentence boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeBigram {
    k: usize,
    log_probs: Vec<f64>,
}

impl PhonemeBigram {
    pub fn fit(texts: &[Vec<usize>], k: usize) -> Self {
        let n = k + 1;
        let mut counts = vec![1.0; n * n];
        for s in texts {
            let mut prev = k;
            for &p in s.iter().chain(std::iter::once(&k)) {
                counts[prev * n + p] += 1.0;
                prev = p;
            }
        }
        for row in counts.chunks_mut(n) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|c| *c = (*c / total).ln());
        }
        Self { k, log_probs: counts }
    }

    /// `ln P(next | prev)`; `None` stands for the boundary.
    pub fn log_prob(&self, prev: Option<usize>, next: Option<usize>) -> f64 {
        let n = self.k + 1;
        self.log_probs[prev.unwrap_or(self.k) * n + next.unwrap_or(self.k)]
    }

    /// Total log probability and number of predicted events (length + 1).
    pub fn score(&self, seq: &[usize]) -> (f64, usize) {
        let mut prev = None;
        let mut total = 0.0;
        for &p in seq {
            total += self.log_prob(prev, Some(p));
            prev = Some(p);
        }
        (total + self.log_prob(prev, None), seq.len() + 1)
    }
}

/// Argmax transcription with repeats merged.
pub fn collapsed_argmax(log_probs: &Tensor) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for t in 0..log_probs.rows() {
        let p = log_probs.argmax_row(t);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionScore {
    pub perplexity: f64,
    /// Fraction of the phoneme inventory present in the transcriptions.
    pub usage: f64,
    /// `ln perplexity - ln usage`; lower is better.
    pub value: f64,
}

pub fn selection_score(
    generator: &ParamStore,
    cfg: &GeneratorConfig,
    features: &[Tensor],
    lm: &PhonemeBigram,
) -> Result<SelectionScore, BridgeError> {
    let mut seen = vec![false; lm.k];
    let (mut logp, mut events) = (0.0, 0);
    for x in features {
        let seq = collapsed_argmax(&generate(generator, cfg, x)?.log_probs);
        seq.iter().for_each(|&p| seen[p] = true);
        let (l, n) = lm.score(&seq);
        logp += l;
        events += n;
    }
    let perplexity = (-logp / events.max(1) as f64).exp();
    let usage = seen.iter().filter(|&&s| s).count() as f64 / lm.k as f64;
    Ok(SelectionScore { perplexity, usage, value: perplexity.ln() - usage.ln() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_by_hand() {
        // Boundary row sees "0" twice and nothing else: (2 + 1) / (2 + 3).
        let lm = PhonemeBigram::fit(&[vec![0, 1], vec![0]], 2);
        assert!((lm.log_prob(None, Some(0)) - (3.0f64 / 5.0).ln()).abs() < 1e-12);
        // After 0: one "1", one boundary, one add-one for each of 3 outcomes.
        assert!((lm.log_prob(Some(0), Some(1)) - (2.0f64 / 5.0).ln()).abs() < 1e-12);
        assert!((lm.log_prob(Some(0), Some(0)) - (1.0f64 / 5.0).ln()).abs() < 1e-12);
        for prev in [None, Some(0), Some(1)] {
            let total: f64 = [Some(0), Some(1), None].iter().map(|&n| lm.log_prob(prev, n).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let (l, n) = lm.score(&[0, 1]);
        assert_eq!(n, 3);
        let expect = lm.log_prob(None, Some(0)) + lm.log_prob(Some(0), Some(1)) + lm.log_prob(Some(1), None);
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn collapse_merges_runs() {
        let mut t = Tensor::full(5, 3, -5.0);
        for (r, c) in [(0, 2), (1, 2), (2, 0), (3, 2), (4, 2)] {
            t.set(r, c, 0.0);
        }
        assert_eq!(collapsed_argmax(&t), vec![2, 0, 2]);
    }

    #[test]
    fn true_labels_beat_a_swap() {
        // Text strongly prefers 0 -> 1 -> 2 chains.
        let texts: Vec<Vec<usize>> = (0..50).map(|_| vec![0, 1, 2]).collect();
        let lm = PhonemeBigram::fit(&texts, 3);
        let good = lm.score(&[0, 1, 2]).0;
        let swapped = lm.score(&[1, 0, 2]).0;
        assert!(good > swapped);
    }
}
