//! Construction of the lexicon transducer and lattice acceptors.

use super::{Label, Transducer, WfstError, EPS};
use crate::bridge::PhonemeLattice;

/// How repeated phonemes on consecutive lattice steps are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Collapse {
    /// Consecutive equal phonemes merge into one emission.
    #[default]
    Repeats,
    /// Every step emits its phoneme.
    None,
}

pub fn phoneme_label(p: usize) -> Label {
    (p + 1) as Label
}

pub fn subword_label(s: usize) -> Label {
    (s + 1) as Label
}

/// Kleene closure of the lexicon entries.
///
/// Each entry is a chain leaving and re-entering the start state (which is
/// final); its subword label sits on the first arc. With `silence`, the
/// start state also carries a `silence:eps` self-loop.
pub fn compile_lexicon(
    lexicon: &[Vec<usize>],
    num_phonemes: usize,
    silence: Option<usize>,
) -> Result<Transducer, WfstError> {
    if lexicon.is_empty() {
        return Err(WfstError::EmptyLexicon);
    }
    let mut t = Transducer::new(num_phonemes + 1, lexicon.len() + 1);
    let start = t.add_state();
    t.set_final(start, 0.0);
    for (s, spelling) in lexicon.iter().enumerate() {
        if spelling.is_empty() || spelling.iter().any(|&p| p >= num_phonemes) {
            return Err(WfstError::Invalid(format!("subword {s} has an invalid spelling")));
        }
        let mut src = start;
        for (i, &p) in spelling.iter().enumerate() {
            let dst = if i + 1 == spelling.len() { start } else { t.add_state() };
            let out = if i == 0 { subword_label(s) } else { EPS };
            t.add_arc(src, phoneme_label(p), out, 0.0, dst);
            src = dst;
        }
    }
    if let Some(sil) = silence {
        if sil >= num_phonemes {
            return Err(WfstError::Invalid(format!("silence phoneme {sil} outside inventory")));
        }
        t.add_arc(start, phoneme_label(sil), EPS, 0.0, start);
    }
    Ok(t)
}

/// State of lattice step `t` having read phoneme `p`.
pub(crate) fn lattice_state(t: usize, p: usize, num_phonemes: usize) -> usize {
    1 + t * num_phonemes + p
}

/// Layered acceptor over the lattice: state `(t, p)` means step `t` read
/// phoneme `p`. Entering `(t, p)` costs `-log P_t(p)`; under
/// [`Collapse::Repeats`] the arc from `(t - 1, p)` is epsilon.
/// Zero-probability entries produce no arc.
pub fn lattice_from_logits(lattice: &PhonemeLattice, collapse: Collapse) -> Transducer {
    let k = lattice.num_phonemes();
    let steps = lattice.steps();
    let mut t = Transducer::new(k + 1, k + 1);
    for _ in 0..1 + steps * k {
        t.add_state();
    }
    let cost = |step: usize, p: usize| -lattice.log_probs.get(step, p);
    for p in 0..k {
        let w = cost(0, p);
        if w.is_finite() {
            t.add_arc(0, phoneme_label(p), phoneme_label(p), w, lattice_state(0, p, k));
        }
    }
    for step in 1..steps {
        for q in 0..k {
            let src = lattice_state(step - 1, q, k);
            for p in 0..k {
                let w = cost(step, p);
                if !w.is_finite() {
                    continue;
                }
                let label = if p == q && collapse == Collapse::Repeats { EPS } else { phoneme_label(p) };
                t.add_arc(src, label, label, w, lattice_state(step, p, k));
            }
        }
    }
    for p in 0..k {
        t.set_final(lattice_state(steps - 1, p, k), 0.0);
    }
    t
}

/// Acceptor of exactly the phoneme string `phonemes`.
pub fn linear_acceptor(phonemes: &[usize], num_phonemes: usize) -> Transducer {
    let mut t = Transducer::new(num_phonemes + 1, num_phonemes + 1);
    let mut s = t.add_state();
    for &p in phonemes {
        let n = t.add_state();
        t.add_arc(s, phoneme_label(p), phoneme_label(p), 0.0, n);
        s = n;
    }
    t.set_final(s, 0.0);
    t
}
