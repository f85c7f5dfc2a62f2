//! Token-rate to frame-rate expansion.

use super::LmError;
use crate::numerics::Tensor;

/// Token row feeding each frame. Silence and unaligned frames take the
/// nearest preceding aligned token; frames before the first aligned one take
/// token 0. Without an alignment the frames are split proportionally.
/// Returns `None` when there are no tokens.
pub fn upsample_indices(tokens: usize, alignment: Option<&[Option<usize>]>, frames: usize) -> Result<Option<Vec<usize>>, LmError> {
    if tokens == 0 {
        return Ok(None);
    }
    let Some(al) = alignment else {
        return Ok(Some((0..frames).map(|t| t * tokens / frames.max(1)).collect()));
    };
    if al.len() != frames {
        return Err(LmError::Alignment(format!("{} alignment entries for {frames} frames", al.len())));
    }
    if let Some(&Some(i)) = al.iter().find(|a| matches!(a, Some(i) if *i >= tokens)) {
        return Err(LmError::Alignment(format!("frame aligned to token {i} of {tokens}")));
    }
    let mut last = 0;
    Ok(Some(
        al.iter()
            .map(|a| {
                if let Some(i) = a {
                    last = *i;
                }
                last
            })
            .collect(),
    ))
}

/// `frames x D_m` matrix of per-frame embeddings. The flag is set when the
/// semantic sequence is empty and the output is all zeros.
pub fn upsample(semantic: &Tensor, alignment: Option<&[Option<usize>]>, frames: usize) -> Result<(Tensor, bool), LmError> {
    let d = semantic.cols();
    match upsample_indices(semantic.rows(), alignment, frames)? {
        None => Ok((Tensor::zeros(frames, d), true)),
        Some(idx) => {
            let mut out = Tensor::zeros(frames, d);
            for (t, &i) in idx.iter().enumerate() {
                out.row_slice_mut(t).copy_from_slice(semantic.row_slice(i));
            }
            Ok((out, false))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_fills_everything() {
        let s = Tensor::row(&[1.0, 2.0]);
        let (out, empty) = upsample(&s, Some(&[None, Some(0), None]), 3).unwrap();
        assert!(!empty);
        for t in 0..3 {
            assert_eq!(out.row_slice(t), &[1.0, 2.0]);
        }
    }

    #[test]
    fn two_blocks() {
        let s = Tensor::from_rows(2, 1, vec![7.0, 9.0]);
        let al: Vec<Option<usize>> = (0..10).map(|t| Some(usize::from(t >= 5))).collect();
        let (out, _) = upsample(&s, Some(&al), 10).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0, 7.0, 7.0, 7.0, 9.0, 9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn empty_gives_zero_flag() {
        let (out, empty) = upsample(&Tensor::zeros(0, 4), None, 3).unwrap();
        assert!(empty);
        assert_eq!(out.shape(), &[3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_against_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let l = rng.random_range(1..5);
            let t = rng.random_range(1..12);
            let s = Tensor::from_rows(l, 2, (0..2 * l).map(|i| i as f64).collect());
            let al: Vec<Option<usize>> =
                (0..t).map(|_| if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..l)) }).collect();
            let (out, _) = upsample(&s, Some(&al), t).unwrap();
            for f in 0..t {
                // Scan back for the closest aligned frame.
                let mut src = 0;
                for back in (0..=f).rev() {
                    if let Some(i) = al[back] {
                        src = i;
                        break;
                    }
                }
                assert_eq!(out.row_slice(f), s.row_slice(src));
            }
        }
    }

    #[test]
    fn bad_alignment() {
        let s = Tensor::zeros(2, 1);
        assert!(upsample(&s, Some(&[Some(2)]), 1).is_err());
        assert!(upsample(&s, Some(&[Some(0)]), 2).is_err());
    }
}
