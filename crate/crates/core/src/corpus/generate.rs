//! Labeled utterances, unpaired text, and spoken-QA passages.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{synthesize_features, AcousticSequence};
use super::language::{LanguageSpec, TemplateItem};
use super::CorpusError;

/// BIO-style tag of one subword.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SlotTag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl fmt::Display for SlotTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotTag::Outside => write!(f, "O"),
            SlotTag::Begin(s) => write!(f, "B-{s}"),
            SlotTag::Inside(s) => write!(f, "I-{s}"),
        }
    }
}

impl FromStr for SlotTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::Format(format!("bad slot tag {s:?}"));
        if s == "O" {
            return Ok(SlotTag::Outside);
        }
        let (kind, id) = s.split_once('-').ok_or_else(bad)?;
        let id: usize = id.parse().map_err(|_| bad())?;
        match kind {
            "B" => Ok(SlotTag::Begin(id)),
            "I" => Ok(SlotTag::Inside(id)),
            _ => Err(bad()),
        }
    }
}

impl From<SlotTag> for String {
    fn from(t: SlotTag) -> Self {
        t.to_string()
    }
}

impl TryFrom<String> for SlotTag {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Labeled (slot, inclusive subword interval) spans of a tag sequence.
pub fn tag_spans(tags: &[SlotTag]) -> Vec<(usize, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, t) in tags.iter().enumerate() {
        match *t {
            SlotTag::Begin(s) => {
                if let Some((label, start)) = open.take() {
                    spans.push((label, start, i - 1));
                }
                open = Some((s, i));
            }
            SlotTag::Inside(s) if open.is_some_and(|(l, _)| l == s) => {}
            _ => {
                if let Some((label, start)) = open.take() {
                    spans.push((label, start, i - 1));
                }
            }
        }
    }
    if let Some((label, start)) = open {
        spans.push((label, start, tags.len() - 1));
    }
    spans
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: Utterance,
    pub passage: Utterance,
    /// Inclusive frame span of the answer inside the passage.
    pub answer_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub features: AcousticSequence,
    pub phonemes: Vec<usize>,
    pub subwords: Vec<usize>,
    /// Position in `phonemes` that generated each frame.
    pub frame_alignment: Vec<usize>,
    pub intent: Option<usize>,
    pub slots: Option<Vec<SlotTag>>,
    pub qa: Option<Box<QaExample>>,
}

impl Utterance {
    /// Gold phoneme id of every frame.
    pub fn frame_phonemes(&self) -> Vec<usize> {
        self.frame_alignment.iter().map(|&i| self.phonemes[i]).collect()
    }

    /// Index of the subword each phoneme position belongs to.
    pub fn phoneme_to_subword(&self, spec: &LanguageSpec) -> Vec<usize> {
        self.subwords
            .iter()
            .enumerate()
            .flat_map(|(i, &s)| std::iter::repeat_n(i, spec.lexicon[s].len()))
            .collect()
    }

    /// Gold subword index of every frame.
    pub fn frame_subwords(&self, spec: &LanguageSpec) -> Vec<usize> {
        let map = self.phoneme_to_subword(spec);
        self.frame_alignment.iter().map(|&p| map[p]).collect()
    }

    pub fn check_invariants(&self, spec: &LanguageSpec) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::InvalidUtterance(m.to_string()));
        if self.frame_alignment.len() != self.features.len() {
            return fail("frame alignment length differs from frame count");
        }
        if spec.expand(&self.subwords) != self.phonemes {
            return fail("lexicon expansion of subwords differs from phonemes");
        }
        if let Some(tags) = &self.slots {
            if tags.len() != self.subwords.len() {
                return fail("slot tag count differs from subword count");
            }
        }
        if let Some(qa) = &self.qa {
            let (s, e) = qa.answer_span;
            if s > e || e >= qa.passage.features.len() {
                return fail("answer span outside passage");
            }
            qa.question.check_invariants(spec)?;
            qa.passage.check_invariants(spec)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub text_only: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self { train: 400, dev: 100, test: 100, text_only: 1000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusBundle {
    pub spec: LanguageSpec,
    pub noise_std: f64,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub unpaired_text: Vec<Vec<usize>>,
}

impl CorpusBundle {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

fn has_adjacent_repeat(phonemes: &[usize]) -> bool {
    phonemes.windows(2).any(|w| w[0] == w[1])
}

/// Samples one sentence of `intent`: subwords plus slot tags.
///
/// Sentences whose spelling would repeat a phoneme across a word boundary
/// are resampled.
pub fn sample_sentence(
    spec: &LanguageSpec,
    intent: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<SlotTag>), CorpusError> {
    let templates = &spec.intents[intent].templates;
    for _ in 0..500 {
        let template = &templates[rng.random_range(0..templates.len())];
        let mut words = Vec::with_capacity(template.len());
        let mut tags = Vec::with_capacity(template.len());
        for item in template {
            let (class, tag) = match *item {
                TemplateItem::Class(c) => (c, SlotTag::Outside),
                TemplateItem::Slot(s) => (spec.slots[s].class, SlotTag::Begin(s)),
            };
            let pool = spec.words_in_class(class);
            words.push(pool[rng.random_range(0..pool.len())]);
            tags.push(tag);
        }
        if !has_adjacent_repeat(&spec.expand(&words)) {
            return Ok((words, tags));
        }
    }
    Err(CorpusError::Construction(format!("intent {intent}: no sentence without boundary phoneme repeats")))
}

fn make_utterance(
    spec: &LanguageSpec,
    subwords: Vec<usize>,
    tags: Option<Vec<SlotTag>>,
    intent: Option<usize>,
    noise_std: f64,
    seed: u64,
) -> Result<Utterance, CorpusError> {
    let phonemes = spec.expand(&subwords);
    let (features, frame_alignment) = synthesize_features(&phonemes, spec, noise_std, seed)?;
    Ok(Utterance { features, phonemes, subwords, frame_alignment, intent, slots: tags, qa: None })
}

/// Builds the QA example whose answer is `answer` (subwords, tags, intent).
fn make_qa(
    spec: &LanguageSpec,
    answer: &(Vec<usize>, Vec<SlotTag>),
    intent: usize,
    noise_std: f64,
    seed: u64,
) -> Result<QaExample, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q_words, q_tags) = sample_sentence(spec, intent, &mut rng)?;
    let n_sentences = rng.random_range(3..=6usize);
    let answer_pos = rng.random_range(0..n_sentences);
    let others: Vec<usize> = (0..spec.num_intents()).filter(|&i| i != intent).collect();
    for _ in 0..200 {
        let mut parts: Vec<(Vec<usize>, Vec<SlotTag>, usize)> = Vec::with_capacity(n_sentences);
        for i in 0..n_sentences {
            if i == answer_pos {
                parts.push((answer.0.clone(), answer.1.clone(), intent));
            } else {
                let other = others[rng.random_range(0..others.len())];
                let (w, t) = sample_sentence(spec, other, &mut rng)?;
                parts.push((w, t, other));
            }
        }
        let words: Vec<usize> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
        let phonemes = spec.expand(&words);
        if has_adjacent_repeat(&phonemes) {
            continue;
        }
        let tags: Vec<SlotTag> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
        let passage = make_utterance(spec, words, Some(tags), None, noise_std, derive_seed(seed, &[1]))?;
        let question = make_utterance(spec, q_words, Some(q_tags), Some(intent), noise_std, derive_seed(seed, &[2]))?;
        // Phoneme positions covered by the answer sentence.
        let before: usize = parts[..answer_pos].iter().map(|p| spec.expand(&p.0).len()).sum();
        let len = spec.expand(&answer.0).len();
        let frames: Vec<usize> = passage
            .frame_alignment
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= before && p < before + len)
            .map(|(f, _)| f)
            .collect();
        let answer_span = (frames[0], *frames.last().expect("answer has frames"));
        return Ok(QaExample { question, passage, answer_span });
    }
    Err(CorpusError::Construction("could not assemble a QA passage without boundary repeats".into()))
}

/// Generates a complete labeled corpus plus unpaired text.
pub fn generate_corpus(
    spec: &LanguageSpec,
    counts: CorpusCounts,
    noise_std: f64,
) -> Result<CorpusBundle, CorpusError> {
    let n_intents = spec.num_intents();
    for (name, n) in [("train", counts.train), ("dev", counts.dev), ("test", counts.test)] {
        if n < n_intents.max(1) {
            return Err(CorpusError::InvalidCounts(format!(
                "{name} needs at least one utterance per intent ({n_intents}), got {n}"
            )));
        }
    }
    if counts.text_only == 0 {
        return Err(CorpusError::InvalidCounts("text_only must be >= 1".into()));
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    for (split_id, n) in [counts.train, counts.dev, counts.test].into_iter().enumerate() {
        let mut utts = Vec::with_capacity(n);
        for i in 0..n {
            let seed = derive_seed(spec.seed, &[0xC0, split_id as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let intent = i % n_intents;
            let sentence = sample_sentence(spec, intent, &mut rng)?;
            seen.insert(sentence.0.clone());
            let mut utt = make_utterance(
                spec,
                sentence.0.clone(),
                Some(sentence.1.clone()),
                Some(intent),
                noise_std,
                derive_seed(seed, &[0xF0]),
            )?;
            utt.qa = Some(Box::new(make_qa(spec, &sentence, intent, noise_std, derive_seed(seed, &[0xA0]))?));
            utts.push(utt);
        }
        splits.push(utts);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x7E]));
    let mut unpaired_text = Vec::with_capacity(counts.text_only);
    let mut attempts = 0usize;
    while unpaired_text.len() < counts.text_only {
        attempts += 1;
        if attempts > 200 * counts.text_only + 10_000 {
            return Err(CorpusError::Construction(
                "grammar too small to draw text disjoint from the labeled utterances".into(),
            ));
        }
        let intent = rng.random_range(0..n_intents);
        let (words, _) = sample_sentence(spec, intent, &mut rng)?;
        if !seen.contains(&words) {
            unpaired_text.push(words);
        }
    }

    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(CorpusBundle { spec: spec.clone(), noise_std, train, dev, test, unpaired_text })
}
