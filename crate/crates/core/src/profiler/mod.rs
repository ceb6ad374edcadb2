//! Cross-lingual hidden-state similarity per layer.
//!
//! For every language a candidate set of `Q` router inputs is sampled per
//! layer. Two sets are compared by their mean pairwise cosine, which equals
//! the dot product of the centroids of their unit-normalized rows. The
//! per-layer indicated similarity averages new-vs-old and new-vs-new means.

mod dump;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dump::{read_hsa_dump, write_hsa_dump, HSA_MAGIC, HSA_VERSION};

use crate::corpus::{TaggedCorpus, BOS};
use crate::error::{Error, Result};
use crate::model::{forward_batch, MoeModel, RoutingMode};
use crate::numerics::{dot, norm, Matrix, SeededRng};

/// Classifier layers used for a single expansion.
pub const DEFAULT_CLASSIFIER_LAYERS_SINGLE: usize = 7;
/// Classifier layers used for each step of lifelong expansion.
pub const DEFAULT_CLASSIFIER_LAYERS_LIFELONG: usize = 5;
/// Candidate tokens per language at desk scale.
pub const DEFAULT_Q: usize = 512;

/// Sequences per forward call while collecting candidates.
const FORWARD_CHUNK: usize = 32;

/// `Q` hidden vectors of one language at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub language: String,
    pub layer: usize,
    /// `Q x h`, one hidden state per row.
    pub vectors: Matrix,
}

impl CandidateSet {
    /// Rejects empty sets and zero-norm rows.
    pub fn new(language: impl Into<String>, layer: usize, vectors: Matrix) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::InvalidInput("candidate set is empty".into()));
        }
        if let Some(r) = (0..vectors.rows()).find(|&r| norm(vectors.row(r)) == 0.0) {
            return Err(Error::DegenerateVector(format!("candidate row {r} has zero norm")));
        }
        Ok(Self {
            language: language.into(),
            layer,
            vectors,
        })
    }

    pub fn q(&self) -> usize {
        self.vectors.rows()
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    /// Mean of the unit-normalized rows.
    pub fn unit_centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.width()];
        for r in 0..self.q() {
            let row = self.vectors.row(r);
            let inv = 1.0 / norm(row);
            c.iter_mut().zip(row).for_each(|(o, v)| *o += v * inv);
        }
        let q = self.q() as f64;
        c.iter_mut().for_each(|v| *v /= q);
        c
    }
}

/// Samples `q` non-BOS positions of `language` uniformly without replacement
/// and returns their router inputs, one candidate set per layer. Rows follow
/// the sampling order.
pub fn collect_candidates(
    model: &MoeModel,
    corpus: &TaggedCorpus,
    language: &str,
    q: usize,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    if q < 2 {
        return Err(Error::InvalidInput("candidate sets need at least two tokens".into()));
    }
    let sequences: Vec<&Vec<usize>> = corpus
        .sequences
        .iter()
        .filter(|s| s.lang == language)
        .map(|s| &s.tokens)
        .collect();
    let positions: Vec<(usize, usize)> = sequences
        .iter()
        .enumerate()
        .flat_map(|(s, toks)| {
            toks.iter()
                .enumerate()
                .filter(|(_, &t)| t != BOS)
                .map(move |(i, _)| (s, i))
        })
        .collect();
    if positions.len() < q {
        return Err(Error::SampleSize {
            needed: q,
            available: positions.len(),
        });
    }
    let mut rng = SeededRng::new(seed);
    let picked: Vec<(usize, usize)> = rng
        .sample_indices(positions.len(), q)
        .into_iter()
        .map(|i| positions[i])
        .collect();

    // Forward each needed sequence once, grouped by length in a fixed order.
    let mut needed: Vec<usize> = picked.iter().map(|&(s, _)| s).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &s in &needed {
        by_len.entry(sequences[s].len()).or_default().push(s);
    }
    let chunks: Vec<Vec<usize>> = by_len
        .values()
        .flat_map(|ids| ids.chunks(FORWARD_CHUNK).map(<[usize]>::to_vec))
        .collect();
    let outputs: Vec<Vec<(usize, Vec<Matrix>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&s| sequences[s].clone()).collect();
            let outs = forward_batch(model, &batch, RoutingMode::Plain)?;
            Ok(chunk.iter().copied().zip(outs.into_iter().map(|o| o.taps)).collect())
        })
        .collect::<Result<_>>()?;
    let taps: BTreeMap<usize, Vec<Matrix>> = outputs.into_iter().flatten().collect();

    (0..model.layer_count())
        .map(|layer| {
            let rows: Vec<Vec<f64>> = picked
                .iter()
                .map(|&(s, i)| taps[&s][layer].row(i).to_vec())
                .collect();
            CandidateSet::new(language, layer, Matrix::from_rows(&rows)?)
        })
        .collect()
}

/// Mean cosine over all `Q_A x Q_B` pairs, computed from unit centroids.
pub fn pair_similarity(a: &CandidateSet, b: &CandidateSet) -> Result<f64> {
    if a.layer != b.layer {
        return Err(Error::InvalidInput(format!(
            "comparing layer {} with layer {}",
            a.layer, b.layer
        )));
    }
    if a.width() != b.width() {
        return Err(Error::Shape(format!("hidden widths {} and {}", a.width(), b.width())));
    }
    Ok(dot(&a.unit_centroid(), &b.unit_centroid()).clamp(-1.0, 1.0))
}

/// Pairwise similarities of several languages at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMatrix {
    pub languages: Vec<String>,
    /// Row-major `languages x languages`.
    pub values: Vec<Vec<f64>>,
}

impl PairMatrix {
    /// Similarities among the given same-layer sets.
    pub fn from_sets(sets: &[&CandidateSet]) -> Result<Self> {
        let centroids: Vec<Vec<f64>> = sets.iter().map(|s| s.unit_centroid()).collect();
        for s in sets {
            if s.layer != sets[0].layer || s.width() != sets[0].width() {
                return Err(Error::InvalidInput("pair matrix over mismatched sets".into()));
            }
        }
        let values = centroids
            .iter()
            .map(|a| centroids.iter().map(|b| dot(a, b).clamp(-1.0, 1.0)).collect())
            .collect();
        Ok(Self {
            languages: sets.iter().map(|s| s.language.clone()).collect(),
            values,
        })
    }

    pub fn get(&self, a: &str, b: &str) -> Result<f64> {
        let idx = |l: &str| {
            self.languages
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::InvalidInput(format!("language {l} missing from pair matrix")))
        };
        Ok(self.values[idx(a)?][idx(b)?])
    }
}

/// How the new-vs-new mean is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewNewDenominator {
    /// Mean over ordered distinct pairs: `|L_new|(|L_new| - 1)`.
    #[default]
    Corrected,
    /// `2|L_new|(|L_new| - 1)`, half the true mean.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub index: usize,
    pub s_new_old: f64,
    /// Absent when there is only one new language.
    pub s_new_new: Option<f64>,
    pub s: f64,
}

/// Indicated similarity of one layer.
pub fn indicated_similarity(
    pairs: &PairMatrix,
    index: usize,
    old: &[String],
    new: &[String],
    denominator: NewNewDenominator,
) -> Result<LayerSimilarity> {
    if new.is_empty() {
        return Err(Error::InvalidInput("new language group is empty".into()));
    }
    if old.is_empty() {
        return Err(Error::InvalidInput("old language group is empty".into()));
    }
    let mut cross = 0.0;
    for n in new {
        for o in old {
            cross += pairs.get(n, o)?;
        }
    }
    let s_new_old = cross / (new.len() * old.len()) as f64;
    let s_new_new = if new.len() >= 2 {
        let mut within = 0.0;
        for (j, a) in new.iter().enumerate() {
            for (k, b) in new.iter().enumerate() {
                if j != k {
                    within += pairs.get(a, b)?;
                }
            }
        }
        let ordered = (new.len() * (new.len() - 1)) as f64;
        Some(match denominator {
            NewNewDenominator::Corrected => within / ordered,
            NewNewDenominator::Literal => within / (2.0 * ordered),
        })
    } else {
        None
    };
    let s = match s_new_new {
        Some(nn) => (s_new_old + nn) / 2.0,
        None => s_new_old,
    };
    Ok(LayerSimilarity {
        index,
        s_new_old,
        s_new_new,
        s,
    })
}

/// Layers holding the `k` largest new-vs-old similarities, ascending by index.
/// Ties prefer the lower layer.
pub fn select_classifier_layers(s_new_old: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > s_new_old.len() {
        return Err(Error::InvalidInput(format!(
            "cannot pick {k} classifier layers out of {}",
            s_new_old.len()
        )));
    }
    let mut order: Vec<usize> = (0..s_new_old.len()).collect();
    order.sort_by(|&a, &b| s_new_old[b].total_cmp(&s_new_old[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    /// Hash of the profiled checkpoint bytes.
    pub model_id: String,
    pub q: usize,
    pub seed: u64,
    pub old: Vec<String>,
    pub new: Vec<String>,
    pub denominator: NewNewDenominator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub layers: Vec<LayerSimilarity>,
    /// Per layer language-pair similarities.
    pub pairs: Vec<PairMatrix>,
    pub meta: ProfileMeta,
}

impl SimilarityProfile {
    pub fn indicated(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.s).collect()
    }

    pub fn new_old(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.s_new_old).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,s_new_old,s_new_new,s\n");
        for l in &self.layers {
            let nn = l.s_new_new.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", l.index, l.s_new_old, nn, l.s));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Similarity among all languages of `old` and `new` at every layer.
///
/// Language `i` (in the order old then new) samples with `substream(seed, i)`.
pub fn profile(
    model: &MoeModel,
    corpus: &TaggedCorpus,
    old: &[String],
    new: &[String],
    q: usize,
    seed: u64,
    denominator: NewNewDenominator,
) -> Result<SimilarityProfile> {
    let languages: Vec<&String> = old.iter().chain(new).collect();
    let mut sets = Vec::with_capacity(languages.len());
    for (i, lang) in languages.iter().enumerate() {
        let sub = SeededRng::substream(seed, i as u64).next_u64();
        sets.push(collect_candidates(model, corpus, lang, q, sub)?);
    }
    let mut layers = Vec::with_capacity(model.layer_count());
    let mut pairs = Vec::with_capacity(model.layer_count());
    for layer in 0..model.layer_count() {
        let at_layer: Vec<&CandidateSet> = sets.iter().map(|s| &s[layer]).collect();
        let matrix = PairMatrix::from_sets(&at_layer)?;
        layers.push(indicated_similarity(&matrix, layer, old, new, denominator)?);
        pairs.push(matrix);
    }
    Ok(SimilarityProfile {
        layers,
        pairs,
        meta: ProfileMeta {
            model_id: model_id(model)?,
            q,
            seed,
            old: old.to_vec(),
            new: new.to_vec(),
            denominator,
        },
    })
}

/// Short content hash identifying a model.
pub fn model_id(model: &MoeModel) -> Result<String> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(model.to_bytes()?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}
