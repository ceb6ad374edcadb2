//! Toy decoder-only transformer with per-layer mixture-of-experts FFNs.
//!
//! Blocks are pre-normalized: `a = x + Attn(norm₁(x))`, then the MoE input is
//! `u = norm₂(a)` and the block output is `a + Σ w_i E_i(u)`. The vector `u`
//! is what the router sees and is the hidden state tapped for similarity
//! profiling. Experts are SwiGLU FFNs. A dense model is the special case with
//! one expert and no router per layer.

mod checkpoint;
mod config;
mod forward;
mod moe;
mod partition;

use serde::{Deserialize, Serialize};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExpertInit, ModelConfig};
pub use forward::{forward, forward_batch, ForwardOutput, RouteDecision};
pub(crate) use forward::TapeForward;
pub use moe::{route, top_k, Expert, MoeLayer, Routing, RoutingMode};
pub use partition::{partition_params, ParamSlice, Partition, Stage};

use crate::allocator::AllocationPlan;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// One named parameter matrix of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKey {
    TokenEmbedding,
    PositionEmbedding,
    AttnNorm(usize),
    Query(usize),
    Key(usize),
    Value(usize),
    AttnOut(usize),
    FfnNorm(usize),
    ExpertGate(usize, usize),
    ExpertUp(usize, usize),
    ExpertDown(usize, usize),
    Router(usize),
    Classifier(usize),
    FinalNorm,
    OutputHead,
}

impl ParamKey {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            ParamKey::AttnNorm(l)
            | ParamKey::Query(l)
            | ParamKey::Key(l)
            | ParamKey::Value(l)
            | ParamKey::AttnOut(l)
            | ParamKey::FfnNorm(l)
            | ParamKey::ExpertGate(l, _)
            | ParamKey::ExpertUp(l, _)
            | ParamKey::ExpertDown(l, _)
            | ParamKey::Router(l)
            | ParamKey::Classifier(l) => Some(l),
            _ => None,
        }
    }

    pub fn expert(&self) -> Option<(usize, usize)> {
        match *self {
            ParamKey::ExpertGate(l, e) | ParamKey::ExpertUp(l, e) | ParamKey::ExpertDown(l, e) => {
                Some((l, e))
            }
            _ => None,
        }
    }

    /// Human-readable dotted name, e.g. `layers.2.experts.1.up`.
    pub fn name(&self) -> String {
        match *self {
            ParamKey::TokenEmbedding => "token_embedding".into(),
            ParamKey::PositionEmbedding => "position_embedding".into(),
            ParamKey::AttnNorm(l) => format!("layers.{l}.attn_norm"),
            ParamKey::Query(l) => format!("layers.{l}.attention.query"),
            ParamKey::Key(l) => format!("layers.{l}.attention.key"),
            ParamKey::Value(l) => format!("layers.{l}.attention.value"),
            ParamKey::AttnOut(l) => format!("layers.{l}.attention.output"),
            ParamKey::FfnNorm(l) => format!("layers.{l}.ffn_norm"),
            ParamKey::ExpertGate(l, e) => format!("layers.{l}.experts.{e}.gate"),
            ParamKey::ExpertUp(l, e) => format!("layers.{l}.experts.{e}.up"),
            ParamKey::ExpertDown(l, e) => format!("layers.{l}.experts.{e}.down"),
            ParamKey::Router(l) => format!("layers.{l}.router"),
            ParamKey::Classifier(l) => format!("layers.{l}.classifier"),
            ParamKey::FinalNorm => "final_norm".into(),
            ParamKey::OutputHead => "output_head".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Matrix,
    pub attention: Attention,
    pub ffn_norm: Matrix,
    pub moe: MoeLayer,
}

/// One language-group expansion: which group, and how many experts each layer gained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub group: String,
    pub new_experts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Matrix,
    pub output_head: Matrix,
    pub history: Vec<Expansion>,
}

/// A model that has not been expanded yet: one expert per layer, no routers.
pub type DenseModel = MoeModel;

fn new_expert(config: &ModelConfig, rng: &mut SeededRng) -> Expert {
    let (h, f) = (config.hidden, config.ffn);
    let in_std = 1.0 / (h as f64).sqrt();
    let out_std = 1.0 / (f as f64).sqrt() / (2.0 * config.layers as f64).sqrt();
    Expert {
        gate: rng.gaussian_matrix(h, f, in_std),
        up: rng.gaussian_matrix(h, f, in_std),
        down: rng.gaussian_matrix(f, h, out_std),
    }
}

impl MoeModel {
    /// Randomly initialized dense model.
    pub fn dense(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::substream(config.seed, 0);
        let h = config.hidden;
        let proj_std = 1.0 / (h as f64).sqrt();
        let out_std = proj_std / (2.0 * config.layers as f64).sqrt();
        let token_embedding = rng.gaussian_matrix(config.vocab, h, 1.0);
        let position_embedding = rng.gaussian_matrix(config.context, h, 0.3);
        let blocks = (0..config.layers)
            .map(|_| {
                let attention = Attention {
                    query: rng.gaussian_matrix(h, h, proj_std),
                    key: rng.gaussian_matrix(h, h, proj_std),
                    value: rng.gaussian_matrix(h, h, proj_std),
                    output: rng.gaussian_matrix(h, h, out_std),
                };
                Block {
                    attn_norm: Matrix::filled(1, h, 1.0),
                    attention,
                    ffn_norm: Matrix::filled(1, h, 1.0),
                    moe: MoeLayer::dense(new_expert(&config, &mut rng)),
                }
            })
            .collect();
        let output_head = rng.gaussian_matrix(h, config.vocab, 0.02);
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_norm: Matrix::filled(1, h, 1.0),
            output_head,
            history: Vec::new(),
            config,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.moe.expert_count()).collect()
    }

    pub fn is_dense(&self) -> bool {
        self.history.is_empty()
    }

    /// Expansion that created expert `expert` of `layer`; `None` for the original FFN.
    pub fn expert_origin(&self, layer: usize, expert: usize) -> Option<usize> {
        if expert == 0 {
            return None;
        }
        let mut seen = 1;
        for (i, exp) in self.history.iter().enumerate() {
            seen += exp.new_experts[layer];
            if expert < seen {
                return Some(i);
            }
        }
        None
    }

    /// Indices of the experts added by expansion `expansion` in `layer`.
    pub fn experts_of_expansion(&self, layer: usize, expansion: usize) -> std::ops::Range<usize> {
        let start = 1 + self.history[..expansion]
            .iter()
            .map(|e| e.new_experts[layer])
            .sum::<usize>();
        start..start + self.history[expansion].new_experts[layer]
    }

    /// Layers with a router over at least two experts.
    pub fn moe_layers(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.moe.router.is_some() && b.moe.expert_count() >= 2)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn classifier_layers(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.moe.classifier.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Every parameter in canonical (layer-major) order.
    pub fn params(&self) -> Vec<(ParamKey, &Matrix)> {
        let mut out = vec![
            (ParamKey::TokenEmbedding, &self.token_embedding),
            (ParamKey::PositionEmbedding, &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((ParamKey::AttnNorm(l), &b.attn_norm));
            out.push((ParamKey::Query(l), &b.attention.query));
            out.push((ParamKey::Key(l), &b.attention.key));
            out.push((ParamKey::Value(l), &b.attention.value));
            out.push((ParamKey::AttnOut(l), &b.attention.output));
            out.push((ParamKey::FfnNorm(l), &b.ffn_norm));
            for (e, ex) in b.moe.experts.iter().enumerate() {
                out.push((ParamKey::ExpertGate(l, e), &ex.gate));
                out.push((ParamKey::ExpertUp(l, e), &ex.up));
                out.push((ParamKey::ExpertDown(l, e), &ex.down));
            }
            if let Some(r) = &b.moe.router {
                out.push((ParamKey::Router(l), r));
            }
            if let Some(c) = &b.moe.classifier {
                out.push((ParamKey::Classifier(l), c));
            }
        }
        out.push((ParamKey::FinalNorm, &self.final_norm));
        out.push((ParamKey::OutputHead, &self.output_head));
        out
    }

    pub fn param(&self, key: ParamKey) -> Option<&Matrix> {
        let block = |l: usize| self.blocks.get(l);
        match key {
            ParamKey::TokenEmbedding => Some(&self.token_embedding),
            ParamKey::PositionEmbedding => Some(&self.position_embedding),
            ParamKey::AttnNorm(l) => block(l).map(|b| &b.attn_norm),
            ParamKey::Query(l) => block(l).map(|b| &b.attention.query),
            ParamKey::Key(l) => block(l).map(|b| &b.attention.key),
            ParamKey::Value(l) => block(l).map(|b| &b.attention.value),
            ParamKey::AttnOut(l) => block(l).map(|b| &b.attention.output),
            ParamKey::FfnNorm(l) => block(l).map(|b| &b.ffn_norm),
            ParamKey::ExpertGate(l, e) => block(l).and_then(|b| b.moe.experts.get(e)).map(|x| &x.gate),
            ParamKey::ExpertUp(l, e) => block(l).and_then(|b| b.moe.experts.get(e)).map(|x| &x.up),
            ParamKey::ExpertDown(l, e) => block(l).and_then(|b| b.moe.experts.get(e)).map(|x| &x.down),
            ParamKey::Router(l) => block(l).and_then(|b| b.moe.router.as_ref()),
            ParamKey::Classifier(l) => block(l).and_then(|b| b.moe.classifier.as_ref()),
            ParamKey::FinalNorm => Some(&self.final_norm),
            ParamKey::OutputHead => Some(&self.output_head),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Matrix> {
        let blocks = &mut self.blocks;
        match key {
            ParamKey::TokenEmbedding => Some(&mut self.token_embedding),
            ParamKey::PositionEmbedding => Some(&mut self.position_embedding),
            ParamKey::AttnNorm(l) => blocks.get_mut(l).map(|b| &mut b.attn_norm),
            ParamKey::Query(l) => blocks.get_mut(l).map(|b| &mut b.attention.query),
            ParamKey::Key(l) => blocks.get_mut(l).map(|b| &mut b.attention.key),
            ParamKey::Value(l) => blocks.get_mut(l).map(|b| &mut b.attention.value),
            ParamKey::AttnOut(l) => blocks.get_mut(l).map(|b| &mut b.attention.output),
            ParamKey::FfnNorm(l) => blocks.get_mut(l).map(|b| &mut b.ffn_norm),
            ParamKey::ExpertGate(l, e) => blocks
                .get_mut(l)
                .and_then(|b| b.moe.experts.get_mut(e))
                .map(|x| &mut x.gate),
            ParamKey::ExpertUp(l, e) => blocks
                .get_mut(l)
                .and_then(|b| b.moe.experts.get_mut(e))
                .map(|x| &mut x.up),
            ParamKey::ExpertDown(l, e) => blocks
                .get_mut(l)
                .and_then(|b| b.moe.experts.get_mut(e))
                .map(|x| &mut x.down),
            ParamKey::Router(l) => blocks.get_mut(l).and_then(|b| b.moe.router.as_mut()),
            ParamKey::Classifier(l) => blocks.get_mut(l).and_then(|b| b.moe.classifier.as_mut()),
            ParamKey::FinalNorm => Some(&mut self.final_norm),
            ParamKey::OutputHead => Some(&mut self.output_head),
        }
    }

    /// Adds `plan.new_experts[i]` experts to every layer `i` and extends (or
    /// creates) the routers with zero columns. The new experts are recorded as
    /// expansion `group`.
    pub fn upcycle(&self, plan: &AllocationPlan, group: &str) -> Result<MoeModel> {
        if plan.layers.len() != self.layer_count() {
            return Err(Error::PlanMismatch(format!(
                "plan has {} layers, model has {}",
                plan.layers.len(),
                self.layer_count()
            )));
        }
        let counts = plan.new_experts();
        let mut model = self.clone();
        let mut rng = SeededRng::substream(self.config.seed, 1 + self.history.len() as u64);
        let h = self.config.hidden;
        for (block, &n) in model.blocks.iter_mut().zip(&counts) {
            for _ in 0..n {
                let expert = match self.config.expert_init {
                    ExpertInit::CopyWithNoise { std } => {
                        let base = &block.moe.experts[0];
                        let noisy = |m: &Matrix, rng: &mut SeededRng| {
                            let mut out = m.clone();
                            out.data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
                            out
                        };
                        Expert {
                            gate: noisy(&base.gate, &mut rng),
                            up: noisy(&base.up, &mut rng),
                            down: noisy(&base.down, &mut rng),
                        }
                    }
                    ExpertInit::Random => new_expert(&self.config, &mut rng),
                };
                block.moe.experts.push(expert);
            }
            block.moe.router = Some(match &block.moe.router {
                Some(r) => r.with_extra_columns(n),
                None => Matrix::zeros(h, 1 + n),
            });
        }
        model.history.push(Expansion {
            group: group.to_string(),
            new_experts: counts,
        });
        Ok(model)
    }

    /// Replaces all routing classifiers with zero-initialized ones on `layers`.
    pub fn reset_classifiers(&mut self, layers: &[usize]) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.layer_count()) {
            return Err(Error::InvalidInput(format!("classifier layer {bad} out of range")));
        }
        let h = self.config.hidden;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.moe.classifier = layers.contains(&i).then(|| Matrix::zeros(h, 2));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::AllocationStrategy;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab: 16,
            ffn: 12,
            context: 6,
            top_k: 2,
            seed: 3,
            expert_init: ExpertInit::default(),
        }
    }

    #[test]
    fn upcycle_shapes() {
        let dense = MoeModel::dense(tiny()).unwrap();
        let plan = AllocationPlan::from_counts(&[2, 3], AllocationStrategy::External);
        let moe = dense.upcycle(&plan, "g1").unwrap();
        assert_eq!(moe.expert_counts(), vec![3, 4]);
        assert_eq!(moe.blocks[0].moe.router.as_ref().unwrap().shape(), (8, 3));
        assert_eq!(moe.blocks[1].moe.router.as_ref().unwrap().shape(), (8, 4));
        assert!(moe.blocks[1].moe.router.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        // original FFN untouched, copies are close but not equal
        assert_eq!(moe.blocks[0].moe.experts[0], dense.blocks[0].moe.experts[0]);
        let diff = moe.blocks[0].moe.experts[1].up.data()[0] - dense.blocks[0].moe.experts[0].up.data()[0];
        assert!(diff != 0.0 && diff.abs() < 0.1);
        assert_eq!(moe.expert_origin(1, 0), None);
        assert_eq!(moe.expert_origin(1, 3), Some(0));
    }

    #[test]
    fn upcycle_degenerate_layer() {
        let dense = MoeModel::dense(tiny()).unwrap();
        let plan = AllocationPlan::from_counts(&[0, 1], AllocationStrategy::External);
        let moe = dense.upcycle(&plan, "g1").unwrap();
        assert_eq!(moe.expert_counts(), vec![1, 2]);
        assert_eq!(moe.blocks[0].moe.router.as_ref().unwrap().shape(), (8, 1));
        assert_eq!(moe.moe_layers(), vec![1]);
    }

    #[test]
    fn upcycle_rejects_layer_mismatch() {
        let dense = MoeModel::dense(tiny()).unwrap();
        let plan = AllocationPlan::from_counts(&[1, 1, 1], AllocationStrategy::External);
        assert!(matches!(dense.upcycle(&plan, "g1"), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn uniform_plan_of_two_on_24_layers_gives_three_experts_each() {
        let mut cfg = tiny();
        cfg.layers = 24;
        let dense = MoeModel::dense(cfg).unwrap();
        let moe = dense.upcycle(&AllocationPlan::uniform(24, 2), "g1").unwrap();
        assert!(moe.expert_counts().iter().all(|&n| n == 3));
        assert_eq!(moe.history[0].new_experts.iter().sum::<usize>(), 48);
    }

    #[test]
    fn sequential_expansions_track_origins() {
        let dense = MoeModel::dense(tiny()).unwrap();
        let a = dense
            .upcycle(&AllocationPlan::from_counts(&[1, 2], AllocationStrategy::External), "g1")
            .unwrap();
        let b = a
            .upcycle(&AllocationPlan::from_counts(&[2, 1], AllocationStrategy::External), "g2")
            .unwrap();
        assert_eq!(b.expert_counts(), vec![4, 4]);
        assert_eq!(b.experts_of_expansion(0, 1), 2..4);
        assert_eq!(b.experts_of_expansion(1, 0), 1..3);
        assert_eq!(b.expert_origin(0, 1), Some(0));
        assert_eq!(b.expert_origin(0, 2), Some(1));
        assert_eq!(b.blocks[0].moe.router.as_ref().unwrap().cols(), 4);
        for (layer, block) in b.blocks.iter().enumerate() {
            let added: usize = b.history.iter().map(|e| e.new_experts[layer]).sum();
            assert_eq!(block.moe.expert_count(), added + 1);
        }
    }

    #[test]
    fn params_cover_every_accessor() {
        let dense = MoeModel::dense(tiny()).unwrap();
        let mut moe = dense.upcycle(&AllocationPlan::uniform(2, 1), "g1").unwrap();
        moe.reset_classifiers(&[1]).unwrap();
        for (key, m) in moe.params() {
            assert_eq!(moe.param(key), Some(m), "{}", key.name());
        }
        assert_eq!(moe.classifier_layers(), vec![1]);
    }
}
