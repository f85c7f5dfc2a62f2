//! On-disk corpus layout.
//!
//! ```text
//! spec.json          language and noise level
//! {split}.f32        all frames of the split, little-endian f32, row-major
//! {split}.json       per-utterance frame offsets, transcripts and QA entries
//! labels.jsonl       {"split", "index", "intent", "slots"} per labeled utterance
//! text.jsonl         one subword sequence per line
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::AcousticSequence;
use super::generate::{CorpusBundle, QaExample, SlotTag, Split, Utterance};
use super::language::LanguageSpec;
use super::CorpusError;
use crate::numerics::Tensor;

#[derive(Serialize, Deserialize)]
struct SpecFile {
    language: LanguageSpec,
    noise_std: f64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    offset: usize,
    frames: usize,
    frame_rate: f64,
    phonemes: Vec<usize>,
    subwords: Vec<usize>,
    alignment: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qa: Option<QaEntry>,
}

#[derive(Serialize, Deserialize)]
struct QaEntry {
    question: Box<Entry>,
    question_intent: Option<usize>,
    question_slots: Option<Vec<SlotTag>>,
    passage: Box<Entry>,
    passage_slots: Option<Vec<SlotTag>>,
    answer_span: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    dim: usize,
    total_frames: usize,
    utterances: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    split: Split,
    index: usize,
    intent: Option<usize>,
    slots: Option<Vec<SlotTag>>,
}

fn push_entry(u: &Utterance, blob: &mut Vec<u8>, offset: &mut usize) -> Entry {
    let start = *offset;
    for &v in u.features.frames.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    *offset += u.features.len();
    let qa = u.qa.as_ref().map(|qa| QaEntry {
        question: Box::new(push_entry(&qa.question, blob, offset)),
        question_intent: qa.question.intent,
        question_slots: qa.question.slots.clone(),
        passage: Box::new(push_entry(&qa.passage, blob, offset)),
        passage_slots: qa.passage.slots.clone(),
        answer_span: qa.answer_span,
    });
    Entry {
        offset: start,
        frames: u.features.len(),
        frame_rate: u.features.frame_rate,
        phonemes: u.phonemes.clone(),
        subwords: u.subwords.clone(),
        alignment: u.frame_alignment.clone(),
        qa,
    }
}

pub fn save_corpus(bundle: &CorpusBundle, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;
    let spec = SpecFile { language: bundle.spec.clone(), noise_std: bundle.noise_std };
    fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&spec)?)?;
    let dim = bundle.spec.feature_dim();
    let mut labels = BufWriter::new(fs::File::create(dir.join("labels.jsonl"))?);
    for split in Split::ALL {
        let mut blob = Vec::new();
        let mut offset = 0;
        let mut utterances = Vec::new();
        for (index, u) in bundle.split(split).iter().enumerate() {
            utterances.push(push_entry(u, &mut blob, &mut offset));
            let line = LabelLine { split, index, intent: u.intent, slots: u.slots.clone() };
            serde_json::to_writer(&mut labels, &line)?;
            labels.write_all(b"\n")?;
        }
        fs::write(dir.join(format!("{}.f32", split.name())), &blob)?;
        let manifest = SplitManifest { dim, total_frames: offset, utterances };
        fs::write(dir.join(format!("{}.json", split.name())), serde_json::to_vec(&manifest)?)?;
    }
    labels.flush()?;
    let mut text = BufWriter::new(fs::File::create(dir.join("text.jsonl"))?);
    for sentence in &bundle.unpaired_text {
        serde_json::to_writer(&mut text, sentence)?;
        text.write_all(b"\n")?;
    }
    text.flush()?;
    Ok(())
}

fn read_entry(
    e: &Entry,
    values: &[f32],
    dim: usize,
    intent: Option<usize>,
    slots: Option<Vec<SlotTag>>,
) -> Result<Utterance, CorpusError> {
    let end = e.offset + e.frames;
    if end * dim > values.len() {
        return Err(CorpusError::Format(format!("frames {}..{end} beyond feature file", e.offset)));
    }
    let data = values[e.offset * dim..end * dim].iter().map(|&v| v as f64).collect();
    let features = AcousticSequence::new(Tensor::from_rows(e.frames, dim, data), e.frame_rate)?;
    let qa = match &e.qa {
        Some(q) => Some(Box::new(QaExample {
            question: read_entry(&q.question, values, dim, q.question_intent, q.question_slots.clone())?,
            passage: read_entry(&q.passage, values, dim, None, q.passage_slots.clone())?,
            answer_span: q.answer_span,
        })),
        None => None,
    };
    Ok(Utterance {
        features,
        phonemes: e.phonemes.clone(),
        subwords: e.subwords.clone(),
        frame_alignment: e.alignment.clone(),
        intent,
        slots,
        qa,
    })
}

pub fn load_corpus(dir: &Path) -> Result<CorpusBundle, CorpusError> {
    let spec: SpecFile = serde_json::from_slice(&fs::read(dir.join("spec.json"))?)?;
    spec.language.validate()?;
    let mut labels: Vec<Vec<Option<LabelLine>>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for line in BufReader::new(fs::File::open(dir.join("labels.jsonl"))?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: LabelLine = serde_json::from_str(&line)?;
        let slot = &mut labels[l.split as usize];
        if slot.len() <= l.index {
            slot.resize_with(l.index + 1, || None);
        }
        let index = l.index;
        slot[index] = Some(l);
    }
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let manifest: SplitManifest =
            serde_json::from_slice(&fs::read(dir.join(format!("{}.json", split.name())))?)?;
        if manifest.dim != spec.language.feature_dim() {
            return Err(CorpusError::Format(format!(
                "{} has dim {} but the language uses {}",
                split.name(),
                manifest.dim,
                spec.language.feature_dim()
            )));
        }
        let bytes = fs::read(dir.join(format!("{}.f32", split.name())))?;
        if bytes.len() != manifest.total_frames * manifest.dim * 4 {
            return Err(CorpusError::Format(format!("{}.f32 has {} bytes", split.name(), bytes.len())));
        }
        let values: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut utts = Vec::with_capacity(manifest.utterances.len());
        for (i, e) in manifest.utterances.iter().enumerate() {
            let label = labels[split as usize].get_mut(i).and_then(Option::take);
            let (intent, slots) = label.map_or((None, None), |l| (l.intent, l.slots));
            let u = read_entry(e, &values, manifest.dim, intent, slots)?;
            u.check_invariants(&spec.language)?;
            utts.push(u);
        }
        splits.push(utts);
    }
    let mut unpaired_text = Vec::new();
    for line in BufReader::new(fs::File::open(dir.join("text.jsonl"))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            unpaired_text.push(serde_json::from_str(&line)?);
        }
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(CorpusBundle { spec: spec.language, noise_std: spec.noise_std, train, dev, test, unpaired_text })
}
