//! Lightweight task decoders.

use std::rc::Rc;

use rand::Rng;

use super::metrics::Span;
use crate::corpus::SlotTag;
use crate::fusion::HEAD_GROUP;
use crate::numerics::nn::{init_linear, linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Sum-pool over frames, then a one-hidden-layer ReLU MLP.
pub fn init_ic(store: &mut ParamStore, width: usize, hidden: usize, classes: usize, rng: &mut impl Rng) {
    init_linear(store, "head.ic.l1", HEAD_GROUP, width, hidden, rng);
    init_linear(store, "head.ic.l2", HEAD_GROUP, hidden, classes, rng);
}

/// `1 x classes` logits.
pub fn ic_logits(g: &mut Graph, store: &ParamStore, fused: Var) -> Var {
    let pooled = g.sum_rows(fused);
    let h = linear(g, store, "head.ic.l1", pooled);
    let h = g.relu(h);
    linear(g, store, "head.ic.l2", h)
}

/// Output inventory of the tagging head: subwords, then a start and an end
/// token per label, then the CTC blank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TagVocab {
    pub subwords: usize,
    pub labels: usize,
}

impl TagVocab {
    pub fn start(&self, label: usize) -> usize {
        self.subwords + 2 * label
    }

    pub fn end(&self, label: usize) -> usize {
        self.subwords + 2 * label + 1
    }

    pub fn blank(&self) -> usize {
        self.subwords + 2 * self.labels
    }

    /// Classes including the blank.
    pub fn size(&self) -> usize {
        self.blank() + 1
    }

    /// Target string: each labeled word is wrapped in its boundary tokens.
    pub fn target(&self, words: &[usize], labels: &[Option<usize>]) -> Vec<usize> {
        let mut out = Vec::with_capacity(words.len() + 2 * labels.iter().flatten().count());
        for (&w, l) in words.iter().zip(labels) {
            match *l {
                Some(l) => out.extend([self.start(l), w, self.end(l)]),
                None => out.push(w),
            }
        }
        out
    }

    /// Labeled spans over word positions. Unmatched or mismatched boundary
    /// tokens are ignored.
    pub fn spans(&self, tokens: &[usize]) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize)> = None;
        let mut words = 0;
        for &t in tokens {
            if t < self.subwords {
                words += 1;
            } else if t < self.blank() {
                let label = (t - self.subwords) / 2;
                if (t - self.subwords) % 2 == 0 {
                    open = Some((label, words));
                } else if let Some((l, s)) = open.take() {
                    if l == label && words > s {
                        spans.push((l, s, words - 1));
                    }
                }
            }
        }
        spans
    }
}

/// Word labels of a tag sequence under `label_of`.
pub fn word_labels(tags: &[SlotTag], label_of: impl Fn(usize) -> usize) -> Vec<Option<usize>> {
    tags.iter()
        .map(|t| match *t {
            SlotTag::Begin(s) | SlotTag::Inside(s) => Some(label_of(s)),
            SlotTag::Outside => None,
        })
        .collect()
}

/// Single-layer Elman RNN followed by a projection onto the tag vocabulary.
pub fn init_tag(store: &mut ParamStore, width: usize, hidden: usize, classes: usize, rng: &mut impl Rng) {
    store.insert_normal("head.tag.wx", HEAD_GROUP, width, hidden, (1.0 / width as f64).sqrt(), rng);
    store.insert_normal("head.tag.wh", HEAD_GROUP, hidden, hidden, 0.5 / (hidden as f64).sqrt(), rng);
    store.insert_zeros("head.tag.b", HEAD_GROUP, 1, hidden);
    init_linear(store, "head.tag.out", HEAD_GROUP, hidden, classes, rng);
}

/// `T x classes` logits.
pub fn tag_logits(g: &mut Graph, store: &ParamStore, fused: Var) -> Var {
    let t = g.value(fused).rows();
    let wx = g.param(store, "head.tag.wx");
    let wh = g.param(store, "head.tag.wh");
    let b = g.param(store, "head.tag.b");
    let xw = g.matmul(fused, wx);
    let xw = g.add_row(xw, b);
    let mut states = Vec::with_capacity(t);
    let mut h: Option<Var> = None;
    for step in 0..t {
        let x = g.slice_rows(xw, step, 1);
        let pre = match h {
            Some(prev) => {
                let r = g.matmul(prev, wh);
                g.add(x, r)
            }
            None => x,
        };
        let cur = g.tanh(pre);
        states.push(cur);
        h = Some(cur);
    }
    let hs = g.concat_rows(&states);
    linear(g, store, "head.tag.out", hs)
}

/// Per-position start and end scores after a learned separator.
pub fn init_span(store: &mut ParamStore, width: usize, rng: &mut impl Rng) {
    store.insert_normal("head.span.sep", HEAD_GROUP, 1, width, 0.1, rng);
    init_linear(store, "head.span.out", HEAD_GROUP, width, 2, rng);
}

/// Scores over `[question ; sep ; passage]`; returns the `P x 2` rows that
/// belong to the passage.
pub fn span_logits(g: &mut Graph, store: &ParamStore, question: Var, passage: Var) -> Var {
    let sep = g.param(store, "head.span.sep");
    let q = g.value(question).rows();
    let p = g.value(passage).rows();
    let seq = g.concat_rows(&[question, sep, passage]);
    let scores = linear(g, store, "head.span.out", seq);
    g.slice_rows(scores, q + 1, p)
}

/// Gathers `rows` of a constant tensor; handy for loop oracles in tests.
pub fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let out = g.gather_rows(v, Rc::new(rows.to_vec()));
    g.value(out).clone()
}
