//! Evaluation metrics.

use super::TaskError;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate; may exceed 1 when the hypothesis is much longer.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, TaskError> {
    if reference.is_empty() {
        return Err(TaskError::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// A labeled span over token positions, inclusive.
pub type Span = (usize, usize, usize);

/// Exact-match counts for micro-averaged F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl F1Counts {
    pub fn of(pred: &[Span], gold: &[Span]) -> Self {
        let mut remaining = gold.to_vec();
        let mut matched = 0;
        for p in pred {
            if let Some(i) = remaining.iter().position(|g| g == p) {
                remaining.swap_remove(i);
                matched += 1;
            }
        }
        Self { matched, predicted: pred.len(), gold: gold.len() }
    }

    pub fn add(&mut self, other: F1Counts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// Harmonic mean of precision and recall. Both sets empty counts as a
    /// perfect score; otherwise a zero denominator gives 0.
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.gold == 0 {
            return 1.0;
        }
        if self.matched == 0 {
            return 0.0;
        }
        let p = self.matched as f64 / self.predicted as f64;
        let r = self.matched as f64 / self.gold as f64;
        2.0 * p * r / (p + r)
    }
}

pub fn slot_f1(pred: &[Span], gold: &[Span]) -> f64 {
    F1Counts::of(pred, gold).f1()
}

/// Frame F1 and overlap (Jaccard) of two inclusive frame spans.
pub fn ff1_aos(pred: (usize, usize), gold: (usize, usize)) -> Result<(f64, f64), TaskError> {
    if gold.1 < gold.0 {
        return Err(TaskError::EmptyReference);
    }
    if pred.1 < pred.0 {
        return Ok((0.0, 0.0));
    }
    let (pl, gl) = (pred.1 - pred.0 + 1, gold.1 - gold.0 + 1);
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    let overlap = if hi >= lo { hi - lo + 1 } else { 0 };
    if overlap == 0 {
        return Ok((0.0, 0.0));
    }
    let p = overlap as f64 / pl as f64;
    let r = overlap as f64 / gl as f64;
    Ok((2.0 * p * r / (p + r), overlap as f64 / (pl + gl - overlap) as f64))
}

/// Highest `start[s] + end[e]` with `e >= s`; ties go to the earliest pair.
pub fn best_span(start: &[f64], end: &[f64]) -> Option<(usize, usize)> {
    let n = start.len().min(end.len());
    if n == 0 {
        return None;
    }
    // Suffix maxima of `end`, keeping the earliest index on ties.
    let mut best_end = vec![(f64::NEG_INFINITY, 0usize); n];
    for e in (0..n).rev() {
        let next = if e + 1 < n { best_end[e + 1] } else { (f64::NEG_INFINITY, n) };
        best_end[e] = if end[e] >= next.0 { (end[e], e) } else { next };
    }
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for s in 0..n {
        let score = start[s] + best_end[s].0;
        if score > best.0 {
            best = (score, s, best_end[s].1);
        }
    }
    Some((best.1, best.2))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over every alignment path, enumerated recursively.
    fn brute_edit(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute_edit(ra, rb) + usize::from(x != y);
                sub.min(brute_edit(ra, b) + 1).min(brute_edit(a, rb) + 1)
            }
        }
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(wer::<u8>(&[1], &[]).is_err());
        assert_eq!(wer(&[1, 2, 3, 4], &[9]).unwrap(), 4.0);
    }

    #[test]
    fn wer_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let a: Vec<u8> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u8> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..3)).collect();
            assert_eq!(edit_distance(&a, &b), brute_edit(&a, &b));
        }
    }

    #[test]
    fn f1_examples() {
        let g = [(0, 1, 1), (1, 3, 3)];
        assert_eq!(slot_f1(&g, &g), 1.0);
        assert_eq!(slot_f1(&[(0, 5, 5)], &g), 0.0);
        let pred = [(0, 0, 0), (0, 1, 1), (0, 2, 2)];
        let gold = [(0, 0, 0), (0, 1, 1), (1, 5, 5), (1, 6, 6)];
        assert!((slot_f1(&pred, &gold) - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(slot_f1(&[], &gold), 0.0);
    }

    #[test]
    fn span_overlap_examples() {
        assert_eq!(ff1_aos((3, 7), (3, 7)).unwrap(), (1.0, 1.0));
        assert_eq!(ff1_aos((0, 2), (5, 9)).unwrap(), (0.0, 0.0));
        let (f, a) = ff1_aos((0, 9), (5, 14)).unwrap();
        assert!((f - 0.5).abs() < 1e-12 && (a - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn best_span_examples() {
        assert_eq!(best_span(&[0.0, 5.0, 0.0], &[0.0, 0.0, 5.0]), Some((1, 2)));
        assert_eq!(best_span(&[1.0; 4], &[1.0; 4]), Some((0, 0)));
        // Unconstrained argmax would be (2, 0).
        assert_eq!(best_span(&[0.0, 0.0, 3.0], &[4.0, 0.0, 1.0]), Some((0, 0)));
    }

    #[test]
    fn best_span_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let n = rng.random_range(1..=6);
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect();
            let e: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect();
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for i in 0..n {
                for j in i..n {
                    if s[i] + e[j] > best.0 {
                        best = (s[i] + e[j], i, j);
                    }
                }
            }
            assert_eq!(best_span(&s, &e), Some((best.1, best.2)));
        }
    }
}
