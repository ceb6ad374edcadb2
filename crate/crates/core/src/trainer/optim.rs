use std::collections::BTreeMap;

use crate::model::{MoeModel, ParamKey, Partition};
use crate::numerics::Matrix;

/// Adam with bias correction. Only entries inside the partition's column
/// ranges are touched, so frozen entries keep their exact bits.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<ParamKey, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut MoeModel, partition: &Partition, grads: &BTreeMap<ParamKey, Matrix>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for slice in &partition.trainable {
            let (Some(g), Some(p)) = (grads.get(&slice.key), model.param_mut(slice.key)) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(slice.key)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let cols = slice.columns.clone().unwrap_or(0..g.cols());
            for r in 0..g.rows() {
                for c in cols.clone() {
                    let gi = g.get(r, c);
                    let mi = self.beta1 * m.get(r, c) + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * v.get(r, c) + (1.0 - self.beta2) * gi * gi;
                    m.set(r, c, mi);
                    v.set(r, c, vi);
                    let update = self.learning_rate * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                    p.set(r, c, p.get(r, c) - update);
                }
            }
        }
    }
}
