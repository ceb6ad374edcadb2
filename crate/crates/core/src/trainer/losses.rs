//! Training objectives.
//!
//! The free functions evaluate each loss on plain matrices and serve as the
//! readable definition. `LossTerms::build` records the same quantities on the
//! tape for training; tests check the two agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TapeForward;
use crate::numerics::{Matrix, Tape, Var};

/// Supervision used for the routing classifiers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// Two-class cross-entropy over every token: old → class 0, new → class 1.
    #[default]
    StandardCe,
    /// Only old tokens contribute, each pushed towards class 0.
    LiteralPaper,
}

fn log_prob(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// Mean of `-ln p(target)` over rows.
pub fn ntp_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape("ntp_loss needs one target per logit row".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidInput(format!("target {t} outside {} classes", logits.cols())));
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -log_prob(logits.row(r), t))
        .sum();
    Ok(total / targets.len() as f64)
}

/// `Σ_i f_i P_i` for one layer, with `f_i = N / (K|T|) · #{t selecting i}`
/// and `P_i` the mean router probability of expert `i`. `scores` holds the
/// full router distribution per token; `K` is clipped to `N`.
pub fn balance_loss(scores: &Matrix, selected: &[Vec<usize>], k: usize) -> Result<f64> {
    let (t, n) = scores.shape();
    if t == 0 {
        return Err(Error::InvalidInput("balance loss over an empty batch".into()));
    }
    if selected.len() != t || k == 0 {
        return Err(Error::Shape("balance loss needs one selection per token".into()));
    }
    let f = selection_fractions(selected, n, k, t)?;
    let mut total = 0.0;
    for (i, fi) in f.iter().enumerate() {
        let p = (0..t).map(|r| scores.get(r, i)).sum::<f64>() / t as f64;
        total += fi * p;
    }
    Ok(total)
}

fn selection_fractions(selected: &[Vec<usize>], n: usize, k: usize, t: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n];
    for s in selected {
        for &e in s {
            *counts
                .get_mut(e)
                .ok_or_else(|| Error::InvalidInput(format!("selected expert {e} of {n}")))? += 1;
        }
    }
    let scale = n as f64 / (k.min(n) * t) as f64;
    Ok(counts.iter().map(|&c| scale * c as f64).collect())
}

/// `-Σ_t F(t) ln G_0(t)` over all given layers, divided by
/// `(#old tokens × #layers)`. Zero when no token is old.
pub fn lpr_loss(scores: &[Matrix], old: &[bool]) -> Result<f64> {
    let n_old = old.iter().filter(|&&o| o).count();
    if n_old == 0 || scores.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for layer in scores {
        if layer.rows() != old.len() {
            return Err(Error::Shape("lpr_loss mask length".into()));
        }
        for (r, &o) in old.iter().enumerate() {
            if o {
                total -= layer.get(r, 0).ln();
            }
        }
    }
    Ok(total / (n_old * scores.len()) as f64)
}

/// Classifier cross-entropy averaged per counted token per classifier layer.
pub fn cls_loss(logits: &[Matrix], old: &[bool], mode: ClsMode) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Configuration("no classifier layers configured".into()));
    }
    let counted = match mode {
        ClsMode::StandardCe => old.len(),
        ClsMode::LiteralPaper => old.iter().filter(|&&o| o).count(),
    };
    if counted == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for layer in logits {
        if layer.rows() != old.len() || layer.cols() != 2 {
            return Err(Error::Shape("cls_loss expects T x 2 logits".into()));
        }
        for (r, &o) in old.iter().enumerate() {
            match (mode, o) {
                (_, true) => total -= log_prob(layer.row(r), 0),
                (ClsMode::StandardCe, false) => total -= log_prob(layer.row(r), 1),
                (ClsMode::LiteralPaper, false) => {}
            }
        }
    }
    Ok(total / (counted * logits.len()) as f64)
}

/// Token-level masks for one batch, flattened in row order.
pub(crate) struct BatchMasks {
    /// Next-token target of every row, `None` on the last position.
    pub targets: Vec<Option<usize>>,
    /// Row is not BOS.
    pub content: Vec<bool>,
    /// Row belongs to an old-language sequence and is not BOS.
    pub old: Vec<bool>,
}

impl BatchMasks {
    pub fn new(batch: &[Vec<usize>], old: &[Vec<bool>]) -> Self {
        let mut targets = Vec::new();
        let mut content = Vec::new();
        let mut old_rows = Vec::new();
        for (seq, mask) in batch.iter().zip(old) {
            for i in 0..seq.len() {
                targets.push(seq.get(i + 1).copied());
                content.push(seq[i] != crate::corpus::BOS);
                old_rows.push(mask[i]);
            }
        }
        Self {
            targets,
            content,
            old: old_rows,
        }
    }
}

/// Handles of the individual losses recorded on a tape; `None` when a term
/// does not apply (no MoE layers, no old tokens, no classifiers).
pub(crate) struct LossTerms {
    pub ntp: Var,
    pub balance: Option<Var>,
    pub lpr: Option<Var>,
    pub cls: Option<Var>,
}

impl LossTerms {
    pub fn build(
        tape: &mut Tape<'_>,
        fwd: &TapeForward,
        masks: &BatchMasks,
        top_k: usize,
        cls_mode: ClsMode,
    ) -> Result<Self> {
        let predicted = masks.targets.iter().filter(|t| t.is_some()).count();
        if predicted == 0 {
            return Err(Error::InvalidInput("batch has no next-token targets".into()));
        }
        let targets = masks.targets.iter().map(|t| t.unwrap_or(0)).collect();
        let weights = masks
            .targets
            .iter()
            .map(|t| if t.is_some() { 1.0 / predicted as f64 } else { 0.0 })
            .collect();
        let ntp = tape.cross_entropy(fwd.logits, targets, weights)?;

        let moe: Vec<_> = fwd.layers.iter().filter(|l| l.router_probs.is_some()).collect();
        let balance = if moe.is_empty() {
            None
        } else {
            let mut terms = Vec::with_capacity(moe.len());
            for layer in &moe {
                let probs = layer.router_probs.expect("filtered");
                let (t, n) = tape.value(probs).shape();
                let f = selection_fractions(&layer.selected, n, top_k, t)?;
                let coeff = Matrix::from_fn(t, n, |_, i| f[i] / t as f64);
                terms.push((tape.weighted_sum(probs, coeff)?, 1.0 / moe.len() as f64));
            }
            Some(tape.lin_comb(terms)?)
        };

        let n_old = masks.old.iter().filter(|&&o| o).count();
        let lpr = if moe.is_empty() || n_old == 0 {
            None
        } else {
            let w = 1.0 / (n_old * moe.len()) as f64;
            let weights: Vec<f64> = masks.old.iter().map(|&o| if o { w } else { 0.0 }).collect();
            let mut terms = Vec::with_capacity(moe.len());
            for layer in &moe {
                let logits = layer.router_logits.expect("filtered");
                let ce = tape.cross_entropy(logits, vec![0; weights.len()], weights.clone())?;
                terms.push((ce, 1.0));
            }
            Some(tape.lin_comb(terms)?)
        };

        let classifiers: Vec<Var> = fwd.layers.iter().filter_map(|l| l.classifier_logits).collect();
        let cls = if classifiers.is_empty() {
            None
        } else {
            let counted: Vec<bool> = match cls_mode {
                ClsMode::StandardCe => masks.content.clone(),
                ClsMode::LiteralPaper => masks.old.clone(),
            };
            let n = counted.iter().filter(|&&c| c).count();
            if n == 0 {
                None
            } else {
                let w = 1.0 / (n * classifiers.len()) as f64;
                let weights: Vec<f64> = counted.iter().map(|&c| if c { w } else { 0.0 }).collect();
                let targets: Vec<usize> = masks.old.iter().map(|&o| usize::from(!o)).collect();
                let mut terms = Vec::with_capacity(classifiers.len());
                for &c in &classifiers {
                    terms.push((tape.cross_entropy(c, targets.clone(), weights.clone())?, 1.0));
                }
                Some(tape.lin_comb(terms)?)
            }
        };
        Ok(Self {
            ntp,
            balance,
            lpr,
            cls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ntp_anchors() {
        let uniform = Matrix::zeros(3, 4);
        assert!((ntp_loss(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let l = ntp_loss(&Matrix::row_vector(&[2.0, 0.0, 1.0]), &[0]).unwrap();
        assert!((l - 0.40761).abs() < 1e-4);
        let confident = Matrix::row_vector(&[60.0, 0.0, 0.0]);
        assert!(ntp_loss(&confident, &[0]).unwrap() < 1e-20);
    }

    #[test]
    fn balance_anchors() {
        // uniform scores, every expert chosen equally often
        let scores = Matrix::filled(4, 4, 0.25);
        let sel = vec![vec![0, 1], vec![2, 3], vec![1, 0], vec![3, 2]];
        assert!((balance_loss(&scores, &sel, 2).unwrap() - 1.0).abs() < 1e-15);

        let scores = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]).unwrap();
        let v = balance_loss(&scores, &[vec![0], vec![0]], 1).unwrap();
        assert!((v - 1.7).abs() < 1e-12);

        // permuting experts leaves the value unchanged
        let perm = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.2, 0.8]]).unwrap();
        assert_eq!(balance_loss(&perm, &[vec![1], vec![1]], 1).unwrap(), v);
        assert!(balance_loss(&Matrix::zeros(0, 2), &[], 1).is_err());
    }

    #[test]
    fn lpr_anchors() {
        let half = Matrix::row_vector(&[0.5, 0.5]);
        assert!((lpr_loss(&[half.clone()], &[true]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(lpr_loss(&[half], &[false]).unwrap(), 0.0);
        let perfect = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        assert_eq!(lpr_loss(&[perfect], &[true, false]).unwrap(), 0.0);
    }

    #[test]
    fn cls_anchors() {
        let zero = Matrix::zeros(1, 2);
        let v = cls_loss(&[zero.clone()], &[true], ClsMode::StandardCe).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let confident = Matrix::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap();
        assert!(cls_loss(&[confident], &[true, false], ClsMode::StandardCe).unwrap() < 1e-20);
        let new_only = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(cls_loss(&[new_only], &[false, false], ClsMode::LiteralPaper).unwrap(), 0.0);
        assert!(matches!(
            cls_loss(&[], &[true], ClsMode::StandardCe),
            Err(Error::Configuration(_))
        ));
    }
}
