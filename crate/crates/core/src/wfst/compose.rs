//! Epsilon-aware composition with a sequence filter.

use std::collections::HashMap;

use super::{Transducer, WfstError, EPS};

/// Composed machine plus the `(left, right)` state pair behind each state.
pub struct Composed {
    pub fst: Transducer,
    pub origin: Vec<(usize, usize)>,
}

/// `left ∘ right`: matches `left` outputs against `right` inputs.
pub fn compose(left: &Transducer, right: &Transducer) -> Result<Transducer, WfstError> {
    compose_traced(left, right).map(|c| c.fst)
}

/// Composition keeping the originating state pairs.
///
/// Epsilon moves are ordered by a two-state filter: once the right machine
/// has taken an epsilon-input arc alone, the left machine may not take an
/// epsilon-output arc alone until a matched move, so each pair of paths
/// appears once.
pub fn compose_traced(left: &Transducer, right: &Transducer) -> Result<Composed, WfstError> {
    if left.osyms != right.isyms {
        return Err(WfstError::AlphabetMismatch(format!(
            "left output alphabet has {} symbols, right input alphabet {}",
            left.osyms, right.isyms
        )));
    }
    let mut fst = Transducer::new(left.isyms, right.osyms);
    let mut origin = Vec::new();
    let mut index: HashMap<(usize, usize, u8), usize> = HashMap::new();
    let mut queue = Vec::new();

    let mut intern = |key: (usize, usize, u8),
                      fst: &mut Transducer,
                      origin: &mut Vec<(usize, usize)>,
                      queue: &mut Vec<(usize, usize, u8)>| {
        *index.entry(key).or_insert_with(|| {
            origin.push((key.0, key.1));
            queue.push(key);
            fst.add_state()
        })
    };

    let start = intern((left.start, right.start, 0), &mut fst, &mut origin, &mut queue);
    fst.start = start;
    let mut head = 0;
    while head < queue.len() {
        let key @ (l, r, filter) = queue[head];
        head += 1;
        let src = intern(key, &mut fst, &mut origin, &mut queue);
        if let (Some(wl), Some(wr)) = (left.finals[l], right.finals[r]) {
            fst.set_final(src, wl + wr);
        }
        for la in &left.arcs[l] {
            if la.olabel == EPS {
                if filter == 0 {
                    let dst = intern((la.next, r, 0), &mut fst, &mut origin, &mut queue);
                    fst.add_arc(src, la.ilabel, EPS, la.weight, dst);
                }
                continue;
            }
            for ra in right.arcs[r].iter().filter(|ra| ra.ilabel == la.olabel) {
                let dst = intern((la.next, ra.next, 0), &mut fst, &mut origin, &mut queue);
                fst.add_arc(src, la.ilabel, ra.olabel, la.weight + ra.weight, dst);
            }
        }
        for ra in right.arcs[r].iter().filter(|ra| ra.ilabel == EPS) {
            let dst = intern((l, ra.next, 1), &mut fst, &mut origin, &mut queue);
            fst.add_arc(src, EPS, ra.olabel, ra.weight, dst);
        }
    }
    Ok(Composed { fst, origin })
}
