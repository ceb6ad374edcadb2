use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaggedCorpus, BOS};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ForwardOutput, MoeModel, RoutingMode};
use crate::numerics::Matrix;

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub group: String,
    /// Predicted positions.
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: usize,
    pub experts: usize,
    /// Share of old-language tokens whose top-1 expert is the original FFN.
    /// `None` on dense layers or without old tokens.
    pub old_to_e0: Option<f64>,
    /// Same share over new-language tokens.
    pub new_to_e0: Option<f64>,
    /// Share of non-BOS tokens the classifier labels correctly.
    pub classifier_accuracy: Option<f64>,
    /// Times each expert was selected, over non-BOS tokens.
    pub utilization: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: RoutingMode,
    pub languages: BTreeMap<String, LanguageMetrics>,
    pub layers: Vec<LayerRouting>,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn languages_csv(&self) -> String {
        let mut out = String::from("language,group,tokens,mean_nll,perplexity\n");
        for (lang, m) in &self.languages {
            out.push_str(&format!(
                "{lang},{},{},{},{}\n",
                m.group, m.tokens, m.mean_nll, m.perplexity
            ));
        }
        out
    }

    pub fn routing_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("layer,experts,old_to_e0,new_to_e0,classifier_accuracy,utilization\n");
        for l in &self.layers {
            let util: Vec<String> = l.utilization.iter().map(|u| u.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.layer,
                l.experts,
                opt(l.old_to_e0),
                opt(l.new_to_e0),
                opt(l.classifier_accuracy),
                util.join(";")
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Default)]
struct Tally {
    nll: BTreeMap<String, (f64, usize)>,
    // per layer: old hits, old total, new hits, new total, cls hits, cls total, usage
    layers: Vec<(usize, usize, usize, usize, usize, usize, Vec<usize>)>,
}

impl Tally {
    fn new(experts: &[usize]) -> Self {
        Self {
            nll: BTreeMap::new(),
            layers: experts.iter().map(|&n| (0, 0, 0, 0, 0, 0, vec![0; n])).collect(),
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (k, (s, n)) in other.nll {
            let e = self.nll.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += n;
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
            a.3 += b.3;
            a.4 += b.4;
            a.5 += b.5;
            a.6.iter_mut().zip(b.6).for_each(|(x, y)| *x += y);
        }
        self
    }

    fn add(&mut self, lang: &str, old: bool, tokens: &[usize], out: &ForwardOutput) {
        let nll = self.nll.entry(lang.to_string()).or_insert((0.0, 0));
        for t in 0..tokens.len().saturating_sub(1) {
            nll.0 -= log_prob(&out.logits, t, tokens[t + 1]);
            nll.1 += 1;
        }
        for (layer, routes) in out.routes.iter().enumerate() {
            let acc = &mut self.layers[layer];
            for (t, r) in routes.iter().enumerate() {
                if tokens[t] == BOS {
                    continue;
                }
                let e0 = usize::from(r.experts[0] == 0);
                if old {
                    acc.0 += e0;
                    acc.1 += 1;
                } else {
                    acc.2 += e0;
                    acc.3 += 1;
                }
                if let Some(verdict) = r.classified_old {
                    acc.4 += usize::from(verdict == old);
                    acc.5 += 1;
                }
                for &e in &r.experts {
                    acc.6[e] += 1;
                }
            }
        }
    }
}

fn log_prob(logits: &Matrix, row: usize, target: usize) -> f64 {
    let r = logits.row(row);
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    r[target] - lse
}

/// Perplexity per language and routing statistics per layer. Tokens of
/// `old_groups` count as old.
pub fn evaluate(
    model: &MoeModel,
    corpus: &TaggedCorpus,
    mode: RoutingMode,
    old_groups: &BTreeSet<String>,
) -> Result<Metrics> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("evaluation corpus is empty".into()));
    }
    corpus.check_vocab(model.config.vocab)?;
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.sequences.iter().enumerate() {
        by_len.entry(s.tokens.len()).or_default().push(i);
    }
    let chunks: Vec<Vec<usize>> = by_len
        .values()
        .flat_map(|ids| ids.chunks(EVAL_CHUNK).map(<[usize]>::to_vec))
        .collect();
    let counts = model.expert_counts();
    let tallies = chunks
        .par_iter()
        .map(|ids| -> Result<Tally> {
            let batch: Vec<Vec<usize>> = ids.iter().map(|&i| corpus.sequences[i].tokens.clone()).collect();
            let outs = forward_batch(model, &batch, mode)?;
            let mut tally = Tally::new(&counts);
            for (&i, out) in ids.iter().zip(&outs) {
                let seq = &corpus.sequences[i];
                tally.add(&seq.lang, old_groups.contains(&seq.group), &seq.tokens, out);
            }
            Ok(tally)
        })
        .collect::<Result<Vec<_>>>()?;
    // sequential merge keeps the summation order fixed
    let tally = tallies.into_iter().fold(Tally::new(&counts), Tally::merge);

    let mut groups = BTreeMap::new();
    for s in &corpus.sequences {
        groups.entry(s.lang.clone()).or_insert_with(|| s.group.clone());
    }
    let languages = tally
        .nll
        .into_iter()
        .map(|(lang, (sum, n))| {
            let mean = if n == 0 { f64::NAN } else { sum / n as f64 };
            let m = LanguageMetrics {
                group: groups[&lang].clone(),
                tokens: n,
                mean_nll: mean,
                perplexity: mean.exp(),
            };
            (lang, m)
        })
        .collect();
    let share = |hits: usize, total: usize| (total > 0).then(|| hits as f64 / total as f64);
    let layers = tally
        .layers
        .into_iter()
        .enumerate()
        .map(|(layer, (oh, ot, nh, nt, ch, ct, usage))| {
            let moe = counts[layer] >= 2;
            LayerRouting {
                layer,
                experts: counts[layer],
                old_to_e0: if moe { share(oh, ot) } else { None },
                new_to_e0: if moe { share(nh, nt) } else { None },
                classifier_accuracy: share(ch, ct),
                utilization: usage,
            }
        })
        .collect();
    Ok(Metrics {
        mode,
        languages,
        layers,
    })
}
