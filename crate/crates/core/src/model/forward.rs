//! Batched forward pass on the autodiff tape.
//!
//! Training and inference share this code path; inference simply marks no
//! parameter as trainable. Expert compute is sparse: each expert only sees the
//! rows routed to it.

use std::collections::HashMap;

use super::{MoeModel, ParamKey, RoutingMode};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix, Tape, Var};

/// Routing outcome of one token in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteDecision {
    /// Selected experts, highest router score first.
    pub experts: Vec<usize>,
    /// Mixing weights aligned with `experts`.
    pub weights: Vec<f64>,
    /// Classifier verdict when the layer has a classifier (`true` = old).
    pub classified_old: Option<bool>,
}

/// Per-layer tape handles needed by the losses.
pub(crate) struct LayerVars {
    /// Normalized MoE input `u` (router and classifier input).
    pub input: Var,
    /// Router logits and full distribution, present on layers with at least
    /// two experts.
    pub router_logits: Option<Var>,
    pub router_probs: Option<Var>,
    pub classifier_logits: Option<Var>,
    /// Experts selected for every row.
    pub selected: Vec<Vec<usize>>,
}

pub(crate) struct TapeForward {
    pub leaves: HashMap<ParamKey, Var>,
    pub logits: Var,
    pub layers: Vec<LayerVars>,
    pub decisions: Vec<Vec<RouteDecision>>,
}

fn check_batch(model: &MoeModel, batch: &[Vec<usize>]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    if len > model.config.context {
        return Err(Error::Length {
            len,
            context: model.config.context,
        });
    }
    for seq in batch {
        if seq.len() != len {
            return Err(Error::Shape("sequences in a batch must share one length".into()));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= model.config.vocab) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of {}",
                model.config.vocab
            )));
        }
    }
    Ok(len)
}

impl TapeForward {
    /// Records the forward pass of `batch` (equal-length sequences) on `tape`.
    pub fn build<'a>(
        tape: &mut Tape<'a>,
        model: &'a MoeModel,
        batch: &[Vec<usize>],
        trainable: &dyn Fn(ParamKey) -> bool,
        mode: RoutingMode,
    ) -> Result<Self> {
        let seq_len = check_batch(model, batch)?;
        let rows = batch.len() * seq_len;
        let k = model.config.top_k;
        let mut leaves = HashMap::new();
        for (key, value) in model.params() {
            leaves.insert(key, tape.leaf(value, trainable(key)));
        }
        let p = |key: ParamKey| leaves[&key];

        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq_len).collect();
        let tok = tape.embed(p(ParamKey::TokenEmbedding), ids)?;
        let pos = tape.embed(p(ParamKey::PositionEmbedding), positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut layers = Vec::with_capacity(model.layer_count());
        let mut decisions = Vec::with_capacity(model.layer_count());
        for (l, block) in model.blocks.iter().enumerate() {
            let h = tape.rms_norm(x, p(ParamKey::AttnNorm(l)))?;
            let q = tape.matmul(h, p(ParamKey::Query(l)))?;
            let kk = tape.matmul(h, p(ParamKey::Key(l)))?;
            let v = tape.matmul(h, p(ParamKey::Value(l)))?;
            let att = tape.causal_attention(q, kk, v, model.config.heads, seq_len)?;
            let att = tape.matmul(att, p(ParamKey::AttnOut(l)))?;
            let a = tape.add(x, att)?;
            let u = tape.rms_norm(a, p(ParamKey::FfnNorm(l)))?;

            let n = block.moe.expert_count();
            let classifier_logits = match block.moe.classifier {
                Some(_) => Some(tape.matmul(u, p(ParamKey::Classifier(l)))?),
                None => None,
            };
            let classified_old: Vec<Option<bool>> = match classifier_logits {
                Some(c) => {
                    let cv = tape.value(c);
                    (0..rows).map(|r| Some(argmax(cv.row(r)) == 0)).collect()
                }
                None => vec![None; rows],
            };
            let (mixture, router_logits, router_probs, selected, weights) = if n >= 2 {
                let router = block.moe.router.as_ref().ok_or_else(|| {
                    Error::Configuration(format!("layer {l} has {n} experts but no router"))
                })?;
                if router.cols() != n {
                    return Err(Error::Shape(format!(
                        "layer {l} router has {} columns for {n} experts",
                        router.cols()
                    )));
                }
                let logits = tape.matmul(u, p(ParamKey::Router(l)))?;
                let probs = tape.softmax_rows(logits);
                let selected: Vec<Vec<usize>> = {
                    let pv = tape.value(probs);
                    (0..rows)
                        .map(|r| {
                            if mode == RoutingMode::Gated && classified_old[r] == Some(true) {
                                vec![0]
                            } else {
                                super::top_k(pv.row(r), k)
                            }
                        })
                        .collect()
                };
                let w = tape.masked_softmax(logits, &selected)?;
                let mut terms = Vec::new();
                for e in 0..n {
                    let routed: Vec<usize> =
                        (0..rows).filter(|&r| selected[r].contains(&e)).collect();
                    if routed.is_empty() {
                        continue;
                    }
                    let xe = tape.gather_rows(u, routed.clone());
                    let ye = expert_forward(tape, &p, xe, l, e)?;
                    let we = tape.gather_entries(w, e, routed.clone());
                    let ye = tape.scale_rows(ye, we)?;
                    terms.push((tape.scatter_rows(ye, routed, rows), 1.0));
                }
                let wv = tape.value(w);
                let weights: Vec<Vec<f64>> = selected
                    .iter()
                    .enumerate()
                    .map(|(r, s)| s.iter().map(|&e| wv.get(r, e)).collect())
                    .collect();
                (tape.lin_comb(terms)?, Some(logits), Some(probs), selected, weights)
            } else {
                let y = expert_forward(tape, &p, u, l, 0)?;
                (y, None, None, vec![vec![0]; rows], vec![vec![1.0]; rows])
            };
            x = tape.add(a, mixture)?;

            decisions.push(
                selected
                    .iter()
                    .zip(weights)
                    .zip(&classified_old)
                    .map(|((s, w), &c)| RouteDecision {
                        experts: s.clone(),
                        weights: w,
                        classified_old: c,
                    })
                    .collect(),
            );
            layers.push(LayerVars {
                input: u,
                router_logits,
                router_probs,
                classifier_logits,
                selected,
            });
        }
        let x = tape.rms_norm(x, p(ParamKey::FinalNorm))?;
        let logits = tape.matmul(x, p(ParamKey::OutputHead))?;
        Ok(Self {
            leaves,
            logits,
            layers,
            decisions,
        })
    }
}

fn expert_forward(
    tape: &mut Tape<'_>,
    p: &dyn Fn(ParamKey) -> Var,
    x: Var,
    layer: usize,
    expert: usize,
) -> Result<Var> {
    let g = tape.matmul(x, p(ParamKey::ExpertGate(layer, expert)))?;
    let g = tape.silu(g);
    let up = tape.matmul(x, p(ParamKey::ExpertUp(layer, expert)))?;
    let hidden = tape.mul(g, up)?;
    tape.matmul(hidden, p(ParamKey::ExpertDown(layer, expert)))
}

/// Inference result for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `T x vocab` next-token logits.
    pub logits: Matrix,
    /// Per layer, the `T x hidden` normalized MoE inputs.
    pub taps: Vec<Matrix>,
    /// Per layer, per token routing decisions.
    pub routes: Vec<Vec<RouteDecision>>,
}

/// Runs `tokens` through the model without recording gradients.
pub fn forward(model: &MoeModel, tokens: &[usize], mode: RoutingMode) -> Result<ForwardOutput> {
    let mut out = forward_batch(model, &[tokens.to_vec()], mode)?;
    Ok(out.remove(0))
}

/// Runs a batch of equal-length sequences and splits the results per sequence.
pub fn forward_batch(
    model: &MoeModel,
    batch: &[Vec<usize>],
    mode: RoutingMode,
) -> Result<Vec<ForwardOutput>> {
    let mut tape = Tape::new();
    let fwd = TapeForward::build(&mut tape, model, batch, &|_| false, mode)?;
    let t = batch[0].len();
    let slice = |m: &Matrix, s: usize| {
        let rows: Vec<Vec<f64>> = (s * t..(s + 1) * t).map(|r| m.row(r).to_vec()).collect();
        Matrix::from_rows(&rows)
    };
    let logits = tape.value(fwd.logits);
    (0..batch.len())
        .map(|s| {
            Ok(ForwardOutput {
                logits: slice(logits, s)?,
                taps: fwd
                    .layers
                    .iter()
                    .map(|lv| slice(tape.value(lv.input), s))
                    .collect::<Result<_>>()?,
                routes: fwd
                    .decisions
                    .iter()
                    .map(|d| d[s * t..(s + 1) * t].to_vec())
                    .collect(),
            })
        })
        .collect()
}
