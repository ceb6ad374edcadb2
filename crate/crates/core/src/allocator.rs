//! Layer-wise expert allocation.
//!
//! A layer receives new experts in inverse proportion to its indicated
//! similarity: `raw_i = (1/S_i) / Σ_j (1/S_j) · δ`, rounded up. Ceiling
//! overshoots the budget by fewer than `m` experts; the overshoot is removed
//! from the most similar layers first, one expert per layer per pass, never
//! taking a layer below one expert.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative distance under which a raw share counts as an exact integer, so
/// that `allocate(c·S, δ)` does not depend on the last bit of `c`.
const INTEGER_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub index: usize,
    /// `NaN` (written as `null`) when the plan did not come from a profile.
    #[serde(with = "nan_as_null")]
    pub similarity: f64,
    pub new_experts: usize,
    pub raw: f64,
    /// Rounded-up share before budget reconciliation.
    #[serde(default)]
    pub ceiled: usize,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationStrategy {
    InverseSimilarity,
    Uniform,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanMode {
    pub strategy: AllocationStrategy,
    pub reconciliation: String,
    /// Identifier of the similarity profile the plan came from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub budget: usize,
    pub layers: Vec<LayerAllocation>,
    #[serde(default)]
    pub classifier_layers: Vec<usize>,
    pub mode: PlanMode,
}

impl AllocationPlan {
    pub fn new_experts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.new_experts).collect()
    }

    pub fn ceiled(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.ceiled).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.new_experts).sum()
    }

    /// Same number of new experts in every layer.
    pub fn uniform(layers: usize, per_layer: usize) -> Self {
        Self::from_counts(&vec![per_layer; layers], AllocationStrategy::Uniform)
    }

    /// Plan from explicit counts, e.g. produced by an external tool.
    pub fn from_counts(counts: &[usize], strategy: AllocationStrategy) -> Self {
        let layers = counts
            .iter()
            .enumerate()
            .map(|(index, &n)| LayerAllocation {
                index,
                similarity: f64::NAN,
                new_experts: n,
                raw: n as f64,
                ceiled: n,
            })
            .collect();
        Self {
            budget: counts.iter().sum(),
            layers,
            classifier_layers: Vec::new(),
            mode: PlanMode {
                strategy,
                reconciliation: "none".into(),
                profile: None,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        // NaN similarities of external plans serialize as null.
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: AllocationPlan = serde_json::from_str(&text)?;
        Ok(plan)
    }
}

fn ceil_snapped(raw: f64) -> usize {
    let nearest = raw.round();
    if (raw - nearest).abs() <= INTEGER_SNAP * nearest.abs().max(1.0) {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

/// Allocates `budget` new experts across layers in inverse proportion to `similarity`.
pub fn allocate(similarity: &[f64], budget: usize) -> Result<AllocationPlan> {
    let m = similarity.len();
    if m == 0 {
        return Err(Error::InvalidInput("empty similarity vector".into()));
    }
    if let Some((layer, &value)) = similarity
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s > 0.0))
    {
        return Err(Error::UnsupportedSimilarity { layer, value });
    }
    if budget < m {
        return Err(Error::Budget { budget, layers: m });
    }

    let inverse: Vec<f64> = similarity.iter().map(|s| 1.0 / s).collect();
    let inverse_total: f64 = inverse.iter().sum();
    let raw: Vec<f64> = inverse
        .iter()
        .map(|inv| inv / inverse_total * budget as f64)
        .collect();
    let ceiled: Vec<usize> = raw.iter().map(|&r| ceil_snapped(r).max(1)).collect();
    let counts = reconcile(&ceiled, similarity, budget)?;

    let layers = (0..m)
        .map(|i| LayerAllocation {
            index: i,
            similarity: similarity[i],
            new_experts: counts[i],
            raw: raw[i],
            ceiled: ceiled[i],
        })
        .collect();
    Ok(AllocationPlan {
        budget,
        layers,
        classifier_layers: Vec::new(),
        mode: PlanMode {
            strategy: AllocationStrategy::InverseSimilarity,
            reconciliation: "decrement_highest_similarity".into(),
            profile: None,
        },
    })
}

/// Removes the overshoot `Σ ceiled − budget`, most similar layers first.
fn reconcile(ceiled: &[usize], similarity: &[f64], budget: usize) -> Result<Vec<usize>> {
    let mut counts = ceiled.to_vec();
    let mut excess = counts.iter().sum::<usize>().saturating_sub(budget);

    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| similarity[b].total_cmp(&similarity[a]).then(a.cmp(&b)));

    while excess > 0 {
        let mut progressed = false;
        for &layer in &order {
            if excess == 0 {
                break;
            }
            if counts[layer] > 1 {
                counts[layer] -= 1;
                excess -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Infeasible(format!(
                "every layer is at one expert with {excess} still over budget"
            )));
        }
    }
    // Ceiling never undershoots, but keep the budget exact regardless.
    let total: usize = counts.iter().sum();
    if total < budget {
        return Err(Error::Infeasible(format!(
            "rounded total {total} below budget {budget}"
        )));
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LayerCount { expected: usize, found: usize },
    Budget { budget: usize, total: usize },
    EmptyLayer { layer: usize },
    /// `S_i < S_j` but the pre-reconciliation count of `i` is below that of `j`.
    Monotonicity { lower_similarity: usize, higher_similarity: usize },
    Reconciliation { layer: usize, ceiled: usize, new_experts: usize },
    ClassifierLayer { layer: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LayerCount { expected, found } => {
                write!(f, "plan has {found} layers, model has {expected}")
            }
            Violation::Budget { budget, total } => {
                write!(f, "plan allocates {total} experts against a budget of {budget}")
            }
            Violation::EmptyLayer { layer } => write!(f, "layer {layer} has no new expert"),
            Violation::Monotonicity {
                lower_similarity,
                higher_similarity,
            } => write!(
                f,
                "layer {lower_similarity} is less similar than layer {higher_similarity} but got fewer experts before reconciliation"
            ),
            Violation::Reconciliation {
                layer,
                ceiled,
                new_experts,
            } => write!(
                f,
                "layer {layer} went from {ceiled} to {new_experts} during reconciliation"
            ),
            Violation::ClassifierLayer { layer } => {
                write!(f, "classifier layer {layer} is out of range")
            }
        }
    }
}

/// Checks every plan invariant; an empty list means the plan is valid.
pub fn validate(plan: &AllocationPlan, m: usize) -> Vec<Violation> {
    let mut violations = Vec::new();
    if plan.layers.len() != m {
        violations.push(Violation::LayerCount {
            expected: m,
            found: plan.layers.len(),
        });
    }
    let total = plan.total();
    if total != plan.budget {
        violations.push(Violation::Budget {
            budget: plan.budget,
            total,
        });
    }
    for l in &plan.layers {
        if l.new_experts == 0 {
            violations.push(Violation::EmptyLayer { layer: l.index });
        }
        if l.new_experts > l.ceiled {
            violations.push(Violation::Reconciliation {
                layer: l.index,
                ceiled: l.ceiled,
                new_experts: l.new_experts,
            });
        }
    }
    let removed: usize = plan
        .layers
        .iter()
        .map(|l| l.ceiled.saturating_sub(l.new_experts))
        .sum();
    let overshoot = plan.ceiled().iter().sum::<usize>().saturating_sub(plan.budget);
    if removed > overshoot {
        for l in plan.layers.iter().filter(|l| l.ceiled > l.new_experts) {
            violations.push(Violation::Reconciliation {
                layer: l.index,
                ceiled: l.ceiled,
                new_experts: l.new_experts,
            });
        }
    }
    for a in &plan.layers {
        for b in &plan.layers {
            if a.similarity.is_finite()
                && b.similarity.is_finite()
                && a.similarity < b.similarity
                && a.ceiled < b.ceiled
            {
                violations.push(Violation::Monotonicity {
                    lower_similarity: a.index,
                    higher_similarity: b.index,
                });
            }
        }
    }
    for &layer in &plan.classifier_layers {
        if layer >= m {
            violations.push(Violation::ClassifierLayer { layer });
        }
    }
    violations
}
