//! Tropical-semiring transducers mapping phoneme lattices to subwords.
//!
//! Label 0 is epsilon; phoneme `p` and subword `s` are labels `p + 1` and
//! `s + 1` on their respective tapes.

pub mod build;
pub mod compose;
pub mod decode;
pub mod shortest;

pub use build::{compile_lexicon, lattice_from_logits, linear_acceptor, Collapse};
pub use compose::compose;
pub use decode::{decode, DecodeResult};
pub use shortest::{shortest_path, Path};

use std::fmt::Write as _;

pub type Label = u32;
pub const EPS: Label = 0;

#[derive(Debug, thiserror::Error)]
pub enum WfstError {
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("invalid transducer: {0}")]
    Invalid(String),
    #[error("alphabet mismatch: {0}")]
    AlphabetMismatch(String),
    #[error("no accepting path")]
    NoPath,
    #[error("negative-weight cycle reachable from the start state")]
    NegativeCycle,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Bridge(#[from] crate::bridge::BridgeError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: f64,
    pub next: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transducer {
    pub start: usize,
    /// Outgoing arcs of each state.
    pub arcs: Vec<Vec<Arc>>,
    pub finals: Vec<Option<f64>>,
    /// Input alphabet size including epsilon.
    pub isyms: usize,
    /// Output alphabet size including epsilon.
    pub osyms: usize,
}

impl Transducer {
    pub fn new(isyms: usize, osyms: usize) -> Self {
        Self { start: 0, arcs: Vec::new(), finals: Vec::new(), isyms, osyms }
    }

    pub fn add_state(&mut self) -> usize {
        self.arcs.push(Vec::new());
        self.finals.push(None);
        self.arcs.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.arcs.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.iter().map(Vec::len).sum()
    }

    pub fn add_arc(&mut self, src: usize, ilabel: Label, olabel: Label, weight: f64, next: usize) {
        self.arcs[src].push(Arc { ilabel, olabel, weight, next });
    }

    pub fn set_final(&mut self, state: usize, weight: f64) {
        self.finals[state] = Some(weight);
    }

    /// Checks label ranges, finiteness, and that some final state is reachable.
    pub fn validate(&self) -> Result<(), WfstError> {
        let n = self.num_states();
        if self.start >= n {
            return Err(WfstError::Invalid(format!("start {} of {n} states", self.start)));
        }
        for (s, arcs) in self.arcs.iter().enumerate() {
            for a in arcs {
                if a.next >= n || a.ilabel as usize >= self.isyms || a.olabel as usize >= self.osyms {
                    return Err(WfstError::Invalid(format!("arc out of range at state {s}: {a:?}")));
                }
                if !a.weight.is_finite() {
                    return Err(WfstError::Invalid(format!("non-finite arc weight at state {s}")));
                }
            }
        }
        if self.finals.iter().flatten().any(|w| !w.is_finite()) {
            return Err(WfstError::Invalid("non-finite final weight".into()));
        }
        let reach = self.accessible();
        if !(0..n).any(|s| reach[s] && self.finals[s].is_some()) {
            return Err(WfstError::Invalid("no final state reachable from start".into()));
        }
        Ok(())
    }

    pub fn accessible(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let mut stack = vec![self.start];
        seen[self.start] = true;
        while let Some(s) = stack.pop() {
            for a in &self.arcs[s] {
                if !seen[a.next] {
                    seen[a.next] = true;
                    stack.push(a.next);
                }
            }
        }
        seen
    }

    /// Topological order of the accessible part, or `None` if it has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let reach = self.accessible();
        let mut indeg = vec![0usize; self.num_states()];
        for s in (0..self.num_states()).filter(|&s| reach[s]) {
            for a in &self.arcs[s] {
                indeg[a.next] += 1;
            }
        }
        if indeg[self.start] > 0 {
            return None;
        }
        let mut order = Vec::new();
        let mut ready = vec![self.start];
        while let Some(s) = ready.pop() {
            order.push(s);
            for a in &self.arcs[s] {
                indeg[a.next] -= 1;
                if indeg[a.next] == 0 {
                    ready.push(a.next);
                }
            }
        }
        (order.len() == reach.iter().filter(|&&r| r).count()).then_some(order)
    }

    /// Text form: a `#` header, one `src dst in out weight` line per arc, then
    /// one `state weight` line per final state. Weights use shortest
    /// round-trip formatting, so parsing restores them bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# start {} states {} isyms {} osyms {}\n",
            self.start,
            self.num_states(),
            self.isyms,
            self.osyms
        );
        for (s, arcs) in self.arcs.iter().enumerate() {
            for a in arcs {
                let _ = writeln!(out, "{s} {} {} {} {}", a.next, a.ilabel, a.olabel, a.weight);
            }
        }
        for (s, f) in self.finals.iter().enumerate() {
            if let Some(w) = f {
                let _ = writeln!(out, "{s} {w}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, WfstError> {
        let err = |line: usize, msg: &str| WfstError::Parse { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let fields: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
        let header_value = |key: &str| -> Result<usize, WfstError> {
            let i = fields.iter().position(|f| *f == key).ok_or_else(|| err(1, &format!("header lacks {key}")))?;
            fields.get(i + 1).and_then(|v| v.parse().ok()).ok_or_else(|| err(1, &format!("bad {key}")))
        };
        let start = header_value("start")?;
        let states = header_value("states")?;
        let mut t = Transducer::new(header_value("isyms")?, header_value("osyms")?);
        for _ in 0..states {
            t.add_state();
        }
        t.start = start;
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let state = |s: &str| -> Result<usize, WfstError> {
                let v: usize = s.parse().map_err(|_| err(line_no, "bad state id"))?;
                if v >= states {
                    return Err(err(line_no, "state id out of range"));
                }
                Ok(v)
            };
            let weight = |s: &str| s.parse::<f64>().map_err(|_| err(line_no, "bad weight"));
            match f.len() {
                5 => {
                    let label = |s: &str| s.parse::<Label>().map_err(|_| err(line_no, "bad label"));
                    let (src, dst) = (state(f[0])?, state(f[1])?);
                    t.add_arc(src, label(f[2])?, label(f[3])?, weight(f[4])?, dst);
                }
                2 => {
                    let s = state(f[0])?;
                    t.set_final(s, weight(f[1])?);
                }
                _ => return Err(err(line_no, "expected 5 (arc) or 2 (final) fields")),
            }
        }
        t.validate()?;
        Ok(t)
    }
}
