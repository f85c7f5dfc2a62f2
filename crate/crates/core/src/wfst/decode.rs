//! Lattice-to-subword decoding: acceptor, composition, best path, alignment.

use serde::{Deserialize, Serialize};

use super::build::{lattice_from_logits, Collapse};
use super::compose::compose_traced;
use super::shortest::shortest_path;
use super::{Transducer, WfstError, EPS};
use crate::bridge::PhonemeLattice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub subwords: Vec<usize>,
    pub path_weight: f64,
    /// Index into `subwords` spelled at each lattice step; `None` for silence.
    pub alignment: Vec<Option<usize>>,
    /// `alignment` projected onto input frames through the stride map.
    pub frame_alignment: Vec<Option<usize>>,
    /// Set when the lattice admits no lexicon path; everything else is empty.
    pub no_path: bool,
}

/// Best subword sequence for `lattice` under lexicon transducer `lex`.
pub fn decode(lattice: &PhonemeLattice, lex: &Transducer, collapse: Collapse) -> Result<DecodeResult, WfstError> {
    let k = lattice.num_phonemes();
    let acceptor = lattice_from_logits(lattice, collapse);
    let composed = compose_traced(&acceptor, lex)?;
    let path = match shortest_path(&composed.fst) {
        Ok(p) => p,
        Err(WfstError::NoPath) => {
            return Ok(DecodeResult {
                subwords: Vec::new(),
                path_weight: f64::INFINITY,
                alignment: vec![None; lattice.steps()],
                frame_alignment: vec![None; lattice.frames()],
                no_path: true,
            })
        }
        Err(e) => return Err(e),
    };

    let mut subwords = Vec::new();
    let mut alignment: Vec<Option<usize>> = Vec::with_capacity(lattice.steps());
    for (i, arc) in path.arcs.iter().enumerate() {
        let (a_src, l_src) = composed.origin[path.states[i]];
        let (a_dst, l_dst) = composed.origin[path.states[i + 1]];
        if arc.olabel != EPS {
            subwords.push(arc.olabel as usize - 1);
        }
        if a_dst == a_src {
            continue;
        }
        let label = if arc.ilabel == EPS {
            // Collapsed repeat: same unit as the previous step.
            alignment.last().copied().flatten()
        } else if l_src == lex.start && l_dst == lex.start && arc.olabel == EPS {
            None
        } else {
            subwords.len().checked_sub(1)
        };
        debug_assert_eq!((a_dst - 1) / k, alignment.len());
        alignment.push(label);
    }
    let frame_alignment = lattice.to_frames(&alignment);
    Ok(DecodeResult { subwords, path_weight: path.weight, alignment, frame_alignment, no_path: false })
}
