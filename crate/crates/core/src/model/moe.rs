//! Per-token reference implementation of the MoE layer.
//!
//! These functions work on single hidden vectors and mirror the routing
//! equations one to one. The batched forward pass in `forward.rs` is checked
//! against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Router-only top-K mixing.
    Plain,
    /// Classifier first: tokens judged "old" go straight to expert 0.
    Gated,
}

/// One SwiGLU feed-forward expert: `down(silu(x·gate) ⊙ (x·up))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, &xk) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
    out
}

impl Expert {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let g = vec_mat(x, &self.gate);
        let u = vec_mat(x, &self.up);
        let hidden: Vec<f64> = g
            .iter()
            .zip(&u)
            .map(|(&a, &b)| a / (1.0 + (-a).exp()) * b)
            .collect();
        vec_mat(&hidden, &self.down)
    }
}

/// Result of routing one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Selected experts, highest score first.
    pub experts: Vec<usize>,
    /// Renormalized mixing weights aligned with `experts`.
    pub weights: Vec<f64>,
    /// Full router distribution over all experts.
    pub scores: Vec<f64>,
}

/// Indices of the `k` largest entries, highest first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Scores every expert, keeps the top `k` (clipped to the expert count) and
/// renormalizes their scores to sum to one.
pub fn route(x: &[f64], router: &Matrix, k: usize) -> Result<Routing> {
    if x.len() != router.rows() {
        return Err(Error::Shape(format!(
            "router expects width {}, got {}",
            router.rows(),
            x.len()
        )));
    }
    if k == 0 || router.cols() == 0 {
        return Err(Error::InvalidInput("routing needs k >= 1 and at least one expert".into()));
    }
    let scores = softmax(&vec_mat(x, router))?;
    let experts = top_k(&scores, k);
    let total: f64 = experts.iter().map(|&i| scores[i]).sum();
    let weights = experts.iter().map(|&i| scores[i] / total).collect();
    Ok(Routing {
        experts,
        weights,
        scores,
    })
}

/// Experts, router and optional routing classifier of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// `experts[0]` is the original dense FFN.
    pub experts: Vec<Expert>,
    /// `hidden x experts`; absent on a dense layer.
    pub router: Option<Matrix>,
    /// `hidden x 2`; column 0 scores "old language", column 1 "new".
    pub classifier: Option<Matrix>,
}

impl MoeLayer {
    pub fn dense(expert: Expert) -> Self {
        Self {
            experts: vec![expert],
            router: None,
            classifier: None,
        }
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    /// Classifier verdict for `x`: `true` means "old language".
    pub fn classify_old(&self, x: &[f64]) -> Option<bool> {
        self.classifier.as_ref().map(|w| argmax(&vec_mat(x, w)) == 0)
    }

    /// Expert mixture without the residual term.
    pub fn mixture(&self, x: &[f64], k: usize, mode: RoutingMode) -> Result<(Vec<f64>, Routing)> {
        if mode == RoutingMode::Gated {
            let old = self.classify_old(x).ok_or_else(|| {
                Error::Configuration("gated routing on a layer without a classifier".into())
            })?;
            if old {
                let routing = Routing {
                    experts: vec![0],
                    weights: vec![1.0],
                    scores: Vec::new(),
                };
                return Ok((self.experts[0].forward(x), routing));
            }
        }
        let Some(router) = &self.router else {
            let routing = Routing {
                experts: vec![0],
                weights: vec![1.0],
                scores: vec![1.0],
            };
            return Ok((self.experts[0].forward(x), routing));
        };
        if router.cols() != self.experts.len() {
            return Err(Error::Shape(format!(
                "router has {} columns for {} experts",
                router.cols(),
                self.experts.len()
            )));
        }
        let routing = route(x, router, k)?;
        let mut y = vec![0.0; x.len()];
        for (&e, &w) in routing.experts.iter().zip(&routing.weights) {
            for (o, v) in y.iter_mut().zip(self.experts[e].forward(x)) {
                *o += w * v;
            }
        }
        Ok((y, routing))
    }

    /// `y = Σ_{i∈I} w_i E_i(x) + x`, or `E_0(x) + x` when the gate says "old".
    pub fn forward(&self, x: &[f64], k: usize, mode: RoutingMode) -> Result<Vec<f64>> {
        let (mut y, _) = self.mixture(x, k, mode)?;
        y.iter_mut().zip(x).for_each(|(o, v)| *o += v);
        Ok(y)
    }
}
