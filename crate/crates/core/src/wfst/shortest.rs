//! Single best path in the tropical semiring.
//!
//! Equal-weight paths are ordered by output string, shorter first and then
//! lexicographically. Unlike plain lexicographic order this is preserved
//! under appending a common suffix, so per-state dynamic programming picks
//! the same path as global enumeration.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::rc::Rc;

use super::{Arc, Label, Transducer, WfstError, EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Sum of arc weights plus the final weight, accumulated left to right.
    pub weight: f64,
    pub states: Vec<usize>,
    pub arcs: Vec<Arc>,
}

impl Path {
    pub fn input(&self) -> Vec<Label> {
        self.arcs.iter().map(|a| a.ilabel).filter(|&l| l != EPS).collect()
    }

    pub fn output(&self) -> Vec<Label> {
        self.arcs.iter().map(|a| a.olabel).filter(|&l| l != EPS).collect()
    }
}

/// Output string as a shared reverse-linked list.
struct Out {
    label: Label,
    len: usize,
    parent: Option<Rc<Out>>,
}

fn materialize(o: &Option<Rc<Out>>) -> Vec<Label> {
    let mut v = Vec::new();
    let mut cur = o.clone();
    while let Some(node) = cur {
        v.push(node.label);
        cur = node.parent.clone();
    }
    v.reverse();
    v
}

fn out_len(o: &Option<Rc<Out>>) -> usize {
    o.as_ref().map_or(0, |n| n.len)
}

/// Shortlex comparison of two output strings.
pub fn shortlex(a: &[Label], b: &[Label]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

fn better(w: f64, o: &Option<Rc<Out>>, w2: f64, o2: &Option<Rc<Out>>) -> bool {
    if w != w2 {
        return w < w2;
    }
    if out_len(o) != out_len(o2) {
        return out_len(o) < out_len(o2);
    }
    materialize(o) < materialize(o2)
}

struct Best {
    weight: f64,
    out: Option<Rc<Out>>,
    pred: Option<(usize, usize)>,
}

fn extend(out: &Option<Rc<Out>>, label: Label) -> Option<Rc<Out>> {
    if label == EPS {
        return out.clone();
    }
    Some(Rc::new(Out { label, len: out_len(out) + 1, parent: out.clone() }))
}

/// Best accepting path. Acyclic machines use a topological sweep; cyclic
/// ones a label-correcting search that reports negative cycles.
pub fn shortest_path(t: &Transducer) -> Result<Path, WfstError> {
    let n = t.num_states();
    if t.start >= n {
        return Err(WfstError::NoPath);
    }
    let mut best: Vec<Option<Best>> = (0..n).map(|_| None).collect();
    best[t.start] = Some(Best { weight: 0.0, out: None, pred: None });

    let relax = |best: &mut Vec<Option<Best>>, s: usize| -> Vec<usize> {
        let (w, out) = {
            let b = best[s].as_ref().expect("relaxing a reached state");
            (b.weight, b.out.clone())
        };
        let mut changed = Vec::new();
        for (i, a) in t.arcs[s].iter().enumerate() {
            let nw = w + a.weight;
            let no = extend(&out, a.olabel);
            let improves = match &best[a.next] {
                None => true,
                Some(cur) => better(nw, &no, cur.weight, &cur.out),
            };
            if improves {
                best[a.next] = Some(Best { weight: nw, out: no, pred: Some((s, i)) });
                changed.push(a.next);
            }
        }
        changed
    };

    if let Some(order) = t.topological_order() {
        for s in order {
            if best[s].is_some() {
                relax(&mut best, s);
            }
        }
    } else {
        let mut queue = VecDeque::from([t.start]);
        let mut queued = vec![false; n];
        let mut pops = vec![0usize; n];
        queued[t.start] = true;
        while let Some(s) = queue.pop_front() {
            queued[s] = false;
            pops[s] += 1;
            if pops[s] > n {
                return Err(WfstError::NegativeCycle);
            }
            for d in relax(&mut best, s) {
                if !queued[d] {
                    queued[d] = true;
                    queue.push_back(d);
                }
            }
        }
    }

    let mut winner: Option<(usize, f64, Option<Rc<Out>>)> = None;
    for s in 0..n {
        if let (Some(fw), Some(b)) = (t.finals[s], &best[s]) {
            let total = b.weight + fw;
            let take = match &winner {
                None => true,
                Some((_, w, o)) => better(total, &b.out, *w, o),
            };
            if take {
                winner = Some((s, total, b.out.clone()));
            }
        }
    }
    let (last, _, _) = winner.ok_or(WfstError::NoPath)?;

    let mut states = vec![last];
    let mut arcs = Vec::new();
    let mut cur = last;
    while let Some((p, i)) = best[cur].as_ref().and_then(|b| b.pred) {
        arcs.push(t.arcs[p][i]);
        states.push(p);
        cur = p;
        if arcs.len() > n * n + 1 {
            return Err(WfstError::Invalid("predecessor cycle".into()));
        }
    }
    arcs.reverse();
    states.reverse();
    let weight = arcs.iter().fold(0.0, |acc, a| acc + a.weight) + t.finals[last].expect("final");
    Ok(Path { weight, states, arcs })
}
