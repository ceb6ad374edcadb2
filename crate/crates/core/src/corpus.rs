//! Synthetic Markov "languages", tagged corpora and review-data mixing.
//!
//! Token 0 is BOS. A shared block of token ids sits right after it and every
//! language owns a private block. A language with overlap `o` and a private
//! block of `A` ids draws its alphabet from `s = round(2Ao / (1 + o))` shared
//! ids plus `A - s` private ids, so two languages with equal `A` and `o` have
//! Jaccard overlap `s / (2A - s) = o` between their alphabets.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const BOS: usize = 0;

/// Successors with non-smoothed mass per state.
const BRANCHING: usize = 6;
/// Probability mass spread uniformly over the whole alphabet.
const SMOOTHING: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    pub group: String,
    /// Private token ids of this language.
    pub block: Range<usize>,
    /// Token ids available for sharing between languages.
    pub shared: Range<usize>,
    /// Target Jaccard overlap with other languages of the same block size.
    pub overlap: f64,
    /// Seed of the transition matrix.
    pub seed: u64,
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.block.is_empty() {
            return Err(Error::InvalidSpec(format!("language {} has an empty block", self.id)));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidSpec(format!(
                "language {} overlap {} outside [0, 1]",
                self.id, self.overlap
            )));
        }
        if self.block.start == BOS || (self.shared.start == BOS && !self.shared.is_empty()) {
            return Err(Error::InvalidSpec("token 0 is reserved for BOS".into()));
        }
        if self.block.start < self.shared.end && self.shared.start < self.block.end {
            return Err(Error::InvalidSpec(format!(
                "language {} block overlaps the shared block",
                self.id
            )));
        }
        if self.shared_count() > self.shared.len() {
            return Err(Error::InvalidSpec(format!(
                "language {} needs {} shared ids, only {} exist",
                self.id,
                self.shared_count(),
                self.shared.len()
            )));
        }
        Ok(())
    }

    fn shared_count(&self) -> usize {
        let a = self.block.len() as f64;
        (2.0 * a * self.overlap / (1.0 + self.overlap)).round() as usize
    }

    /// Sorted token ids this language can emit (BOS excluded).
    pub fn alphabet(&self) -> Vec<usize> {
        let s = self.shared_count();
        let private = self.block.len() - s;
        (self.shared.start..self.shared.start + s)
            .chain(self.block.start..self.block.start + private)
            .collect()
    }
}

/// Lays out `languages` (id, group) with consecutive private blocks of
/// `block_len` ids after a shared block of `shared_len` ids.
pub fn layout_languages(
    languages: &[(&str, &str)],
    block_len: usize,
    shared_len: usize,
    overlap: f64,
    seed: u64,
) -> Vec<LanguageSpec> {
    let shared = 1..1 + shared_len;
    languages
        .iter()
        .enumerate()
        .map(|(i, (id, group))| {
            let start = shared.end + i * block_len;
            LanguageSpec {
                id: id.to_string(),
                group: group.to_string(),
                block: start..start + block_len,
                shared: shared.clone(),
                overlap,
                seed: seed.wrapping_add(i as u64),
            }
        })
        .collect()
}

/// First-order Markov sampler over a language's alphabet.
#[derive(Clone, Debug)]
pub struct MarkovLanguage {
    pub spec: LanguageSpec,
    alphabet: Vec<usize>,
    /// Cumulative transition rows; row `alphabet.len()` is the start distribution.
    cumulative: Vec<Vec<f64>>,
}

impl MarkovLanguage {
    pub fn new(spec: &LanguageSpec) -> Result<Self> {
        spec.validate()?;
        let alphabet = spec.alphabet();
        let a = alphabet.len();
        let mut rng = SeededRng::new(spec.seed);
        let cumulative = (0..=a)
            .map(|_| {
                let mut row = vec![SMOOTHING / a as f64; a];
                let picks = rng.sample_indices(a, BRANCHING.min(a));
                let weights: Vec<f64> = picks.iter().map(|_| rng.exponential()).collect();
                let total: f64 = weights.iter().sum();
                for (&j, w) in picks.iter().zip(&weights) {
                    row[j] += (1.0 - SMOOTHING) * w / total;
                }
                let mut acc = 0.0;
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            alphabet,
            cumulative,
        })
    }

    pub fn alphabet(&self) -> &[usize] {
        &self.alphabet
    }

    /// Transition probabilities out of alphabet position `from` (`None` = start).
    pub fn transition_row(&self, from: Option<usize>) -> Vec<f64> {
        let row = &self.cumulative[from.unwrap_or(self.alphabet.len())];
        let mut prev = 0.0;
        row.iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    fn step(&self, state: usize, rng: &mut SeededRng) -> usize {
        let row = &self.cumulative[state];
        let u = rng.uniform() * row[row.len() - 1];
        row.partition_point(|&c| c <= u).min(row.len() - 1)
    }

    /// BOS followed by `len - 1` sampled tokens.
    pub fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(BOS);
        let mut state = self.alphabet.len();
        while out.len() < len {
            state = self.step(state, rng);
            out.push(self.alphabet[state]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub lang: String,
    pub group: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaggedCorpus {
    pub sequences: Vec<TaggedSequence>,
}

impl TaggedCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Distinct language ids in first-appearance order.
    pub fn languages(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.sequences {
            if !seen.contains(&s.lang) {
                seen.push(s.lang.clone());
            }
        }
        seen
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.sequences.iter().map(|s| s.group.clone()).collect()
    }

    pub fn filter(&self, keep: impl Fn(&TaggedSequence) -> bool) -> TaggedCorpus {
        TaggedCorpus {
            sequences: self.sequences.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn language(&self, lang: &str) -> TaggedCorpus {
        self.filter(|s| s.lang == lang)
    }

    pub fn in_groups(&self, groups: &[&str]) -> TaggedCorpus {
        self.filter(|s| groups.contains(&s.group.as_str()))
    }

    pub fn concat(&self, other: &TaggedCorpus) -> TaggedCorpus {
        TaggedCorpus {
            sequences: self.sequences.iter().chain(&other.sequences).cloned().collect(),
        }
    }

    /// Per-token indicator of old-language membership. BOS positions are
    /// always 0 so they never enter the routing losses.
    pub fn old_mask(&self, old_groups: &BTreeSet<String>) -> Vec<Vec<bool>> {
        self.sequences
            .iter()
            .map(|s| {
                let old = old_groups.contains(&s.group);
                s.tokens.iter().map(|&t| old && t != BOS).collect()
            })
            .collect()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for s in &self.sequences {
            if let Some(&bad) = s.tokens.iter().find(|&&t| t >= vocab) {
                return Err(Error::InvalidInput(format!(
                    "language {} uses token {bad} outside vocabulary {vocab}",
                    s.lang
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in &self.sequences {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut sequences = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: TaggedSequence = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("corpus line {}: {e}", i + 1)))?;
            sequences.push(seq);
        }
        Ok(Self { sequences })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(BufReader::new(std::fs::File::open(path)?))
    }
}

/// Samples `tokens_per_language` tokens (rounded up to whole sequences of
/// `context` tokens) for every language. Language `i` samples from
/// `substream(seed, i)`.
pub fn generate(
    specs: &[LanguageSpec],
    tokens_per_language: usize,
    context: usize,
    seed: u64,
) -> Result<TaggedCorpus> {
    if context < 2 {
        return Err(Error::InvalidInput("context must hold BOS and at least one token".into()));
    }
    if tokens_per_language < context {
        return Err(Error::InvalidInput(format!(
            "tokens per language {tokens_per_language} below context {context}"
        )));
    }
    let ids: BTreeSet<&str> = specs.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != specs.len() {
        return Err(Error::InvalidSpec("duplicate language id".into()));
    }
    let per_lang = tokens_per_language.div_ceil(context);
    let mut sequences = Vec::with_capacity(per_lang * specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let lang = MarkovLanguage::new(spec)?;
        let mut rng = SeededRng::substream(seed, i as u64);
        for _ in 0..per_lang {
            sequences.push(TaggedSequence {
                lang: spec.id.clone(),
                group: spec.group.clone(),
                tokens: lang.sample(context, &mut rng),
            });
        }
    }
    Ok(TaggedCorpus { sequences })
}

/// Stage-2 review data: every old language contributes `ratio_old · u`
/// sequences and every new language `ratio_new · u`, with `u` the largest unit
/// every language can supply. Sequences are drawn without replacement and the
/// result is shuffled.
pub fn review_mixture(
    old: &TaggedCorpus,
    new: &TaggedCorpus,
    ratio_old: usize,
    ratio_new: usize,
    seed: u64,
) -> Result<TaggedCorpus> {
    if old.is_empty() || new.is_empty() {
        return Err(Error::InvalidInput("review mixture needs non-empty old and new corpora".into()));
    }
    if ratio_old == 0 && ratio_new == 0 {
        return Err(Error::InvalidInput("review ratios are both zero".into()));
    }
    let mut sources: Vec<(TaggedCorpus, usize)> = Vec::new();
    for (corpus, ratio) in [(old, ratio_old), (new, ratio_new)] {
        if ratio == 0 {
            continue;
        }
        for lang in corpus.languages() {
            sources.push((corpus.language(&lang), ratio));
        }
    }
    let unit = sources
        .iter()
        .map(|(c, r)| c.len() / r)
        .min()
        .unwrap_or(0);
    if unit == 0 {
        return Err(Error::SampleSize {
            needed: sources.iter().map(|(_, r)| *r).max().unwrap_or(1),
            available: sources.iter().map(|(c, _)| c.len()).min().unwrap_or(0),
        });
    }
    let mut rng = SeededRng::new(seed);
    let mut sequences = Vec::new();
    for (corpus, ratio) in &sources {
        for i in rng.sample_indices(corpus.len(), ratio * unit) {
            sequences.push(corpus.sequences[i].clone());
        }
    }
    rng.shuffle(&mut sequences);
    Ok(TaggedCorpus { sequences })
}
