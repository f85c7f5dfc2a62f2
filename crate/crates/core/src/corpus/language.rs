//! The synthetic phonetic language: phoneme inventory, prefix-free lexicon,
//! word classes, slot types and intent templates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Requested sizes of a generated language.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageSizes {
    pub phonemes: usize,
    pub subwords: usize,
    pub intents: usize,
    pub slots: usize,
    /// Width of the simulated acoustic embedding.
    pub feature_dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Exponent of the Zipf-like phoneme frequency profile used when spelling words.
    pub phoneme_skew: f64,
}

impl Default for LanguageSizes {
    fn default() -> Self {
        Self {
            phonemes: 8,
            subwords: 20,
            intents: 4,
            slots: 2,
            feature_dim: 16,
            min_duration: 2,
            max_duration: 5,
            phoneme_skew: 1.0,
        }
    }
}

/// One position of an intent template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateItem {
    /// Any word of the given carrier class.
    Class(usize),
    /// The filler of slot `s`, drawn from the slot's class.
    Slot(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotType {
    pub name: String,
    pub class: usize,
    /// Coarser entity label used for the NER-style tagging task.
    pub entity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    pub templates: Vec<Vec<TemplateItem>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub seed: u64,
    pub sizes: LanguageSizes,
    /// `lexicon[s]` spells subword `s`.
    pub lexicon: Vec<Vec<usize>>,
    /// Word class of every subword.
    pub word_class: Vec<usize>,
    pub num_classes: usize,
    pub slots: Vec<SlotType>,
    pub num_entities: usize,
    pub intents: Vec<Intent>,
    /// Acoustic prototype of every phoneme (`phonemes x feature_dim`).
    pub prototypes: Vec<Vec<f64>>,
}

impl LanguageSpec {
    pub fn num_phonemes(&self) -> usize {
        self.sizes.phonemes
    }

    pub fn num_subwords(&self) -> usize {
        self.lexicon.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.sizes.feature_dim
    }

    pub fn words_in_class(&self, class: usize) -> Vec<usize> {
        (0..self.lexicon.len()).filter(|&w| self.word_class[w] == class).collect()
    }

    /// Concatenated lexicon spellings of `subwords`.
    pub fn expand(&self, subwords: &[usize]) -> Vec<usize> {
        subwords.iter().flat_map(|&s| self.lexicon[s].iter().copied()).collect()
    }

    /// Checks every structural invariant of the language.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let k = self.sizes.phonemes;
        for (s, spelling) in self.lexicon.iter().enumerate() {
            if spelling.is_empty() || spelling.iter().any(|&p| p >= k) {
                return Err(CorpusError::InvalidLanguage(format!("subword {s} has an invalid spelling")));
            }
        }
        for i in 0..self.lexicon.len() {
            for j in i + 1..self.lexicon.len() {
                if self.lexicon[i] == self.lexicon[j] {
                    return Err(CorpusError::InvalidLanguage(format!("subwords {i} and {j} share a spelling")));
                }
            }
        }
        for (i, intent) in self.intents.iter().enumerate() {
            if intent.templates.is_empty() {
                return Err(CorpusError::InvalidLanguage(format!("intent {i} has no template")));
            }
            for t in &intent.templates {
                for item in t {
                    let class = match *item {
                        TemplateItem::Class(c) => c,
                        TemplateItem::Slot(s) => self.slots[s].class,
                    };
                    if self.words_in_class(class).is_empty() {
                        return Err(CorpusError::InvalidLanguage(format!("class {class} is empty")));
                    }
                }
            }
        }
        if self.prototypes.len() != k || self.prototypes.iter().any(|p| p.len() != self.sizes.feature_dim) {
            return Err(CorpusError::InvalidLanguage("prototype table shape".into()));
        }
        Ok(())
    }
}

/// Number of distinct phoneme strings of length 1..=4 over `k` phonemes.
pub fn spelling_capacity(k: usize) -> u128 {
    (1..=4u32).map(|l| (k as u128).pow(l)).sum()
}

fn is_prefix(a: &[usize], b: &[usize]) -> bool {
    a.len() <= b.len() && b[..a.len()] == *a
}

fn sample_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Builds a language deterministically from `seed`.
///
/// The lexicon is prefix-free with no repeated adjacent phoneme inside a
/// word, so every well-formed utterance has exactly one segmentation into
/// subwords and survives repeat-collapsing decoders.
pub fn build_language(seed: u64, sizes: LanguageSizes) -> Result<LanguageSpec, CorpusError> {
    let k = sizes.phonemes;
    let capacity = spelling_capacity(k);
    if (sizes.subwords as u128) > capacity {
        return Err(CorpusError::Construction(format!(
            "{} subwords requested but only {capacity} distinct spellings of length <= 4 exist over {k} phonemes",
            sizes.subwords
        )));
    }
    if k < 4 || sizes.subwords < 8 || sizes.intents < 2 {
        return Err(CorpusError::Construction(format!(
            "sizes too small: need phonemes >= 4, subwords >= 8, intents >= 2 (got {k}, {}, {})",
            sizes.subwords, sizes.intents
        )));
    }
    if sizes.feature_dim == 0 || sizes.min_duration == 0 || sizes.min_duration > sizes.max_duration {
        return Err(CorpusError::Construction("invalid feature dimension or duration range".into()));
    }
    let num_classes = sizes.slots + 2;
    if sizes.subwords < num_classes {
        return Err(CorpusError::Construction(format!(
            "{} subwords cannot fill {num_classes} word classes",
            sizes.subwords
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let weights: Vec<f64> = (0..k).map(|p| 1.0 / ((p + 1) as f64).powf(sizes.phoneme_skew)).collect();
    let length_weights = [1.0, 3.0, 3.0, 3.0];
    let mut lexicon: Vec<Vec<usize>> = Vec::with_capacity(sizes.subwords);
    'words: for _ in 0..sizes.subwords {
        for _ in 0..2000 {
            let len = sample_weighted(&length_weights, &mut rng) + 1;
            let mut w = Vec::with_capacity(len);
            while w.len() < len {
                let p = sample_weighted(&weights, &mut rng);
                if w.last() != Some(&p) {
                    w.push(p);
                }
            }
            if lexicon.iter().all(|e| !is_prefix(e, &w) && !is_prefix(&w, e)) {
                lexicon.push(w);
                continue 'words;
            }
        }
        return Err(CorpusError::Construction(format!(
            "could not find a prefix-free spelling for subword {} over {k} phonemes",
            lexicon.len()
        )));
    }

    // Round-robin classes over a shuffled word order.
    let mut order: Vec<usize> = (0..sizes.subwords).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut word_class = vec![0; sizes.subwords];
    for (rank, &w) in order.iter().enumerate() {
        word_class[w] = rank % num_classes;
    }

    let num_entities = sizes.slots.div_ceil(2).max(1);
    let slots: Vec<SlotType> = (0..sizes.slots)
        .map(|s| SlotType { name: format!("slot{s}"), class: s, entity: s % num_entities })
        .collect();

    // Every intent uses the same multiset of template items in a different
    // order, so intents are separable only through word order.
    let mut base: Vec<TemplateItem> = (0..sizes.slots).map(TemplateItem::Slot).collect();
    base.push(TemplateItem::Class(sizes.slots));
    base.push(TemplateItem::Class(sizes.slots + 1));
    let max_orders: u128 = (1..=base.len() as u128).product();
    if (sizes.intents as u128) > max_orders {
        return Err(CorpusError::Construction(format!(
            "{} intents need distinct orderings but only {max_orders} exist",
            sizes.intents
        )));
    }
    let mut intents: Vec<Intent> = Vec::with_capacity(sizes.intents);
    while intents.len() < sizes.intents {
        let mut t = base.clone();
        for i in (1..t.len()).rev() {
            t.swap(i, rng.random_range(0..=i));
        }
        if intents.iter().all(|it| it.templates[0] != t) {
            intents.push(Intent { name: format!("intent{}", intents.len()), templates: vec![t] });
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes = (0..k)
        .map(|_| (0..sizes.feature_dim).map(|_| normal.sample(&mut rng) as f32 as f64).collect())
        .collect();

    let spec = LanguageSpec {
        seed,
        sizes,
        lexicon,
        word_class,
        num_classes,
        slots,
        num_entities,
        intents,
        prototypes,
    };
    spec.validate()?;
    Ok(spec)
}
