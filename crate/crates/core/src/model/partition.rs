//! Which parameters each training stage may update.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{MoeModel, ParamKey};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Dense pretraining: everything trains.
    Base,
    /// Newest experts and their router columns.
    Stage1,
    /// Routers and routing classifiers only.
    Stage2,
}

/// A trainable parameter, optionally restricted to a column range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlice {
    pub key: ParamKey,
    pub columns: Option<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub stage: Stage,
    pub trainable: Vec<ParamSlice>,
}

impl Partition {
    pub fn slice(&self, key: ParamKey) -> Option<&ParamSlice> {
        self.trainable.iter().find(|s| s.key == key)
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.slice(key).is_some()
    }

    /// Zeroes the entries of `grad` that this partition freezes.
    pub fn mask(&self, key: ParamKey, grad: &mut Matrix) {
        match self.slice(key) {
            None => grad.data_mut().iter_mut().for_each(|v| *v = 0.0),
            Some(ParamSlice { columns: None, .. }) => {}
            Some(ParamSlice {
                columns: Some(cols),
                ..
            }) => {
                for r in 0..grad.rows() {
                    for (c, v) in grad.row_mut(r).iter_mut().enumerate() {
                        if !cols.contains(&c) {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Number of scalars this partition may change in `model`.
    pub fn scalar_count(&self, model: &MoeModel) -> usize {
        self.trainable
            .iter()
            .filter_map(|s| {
                let m = model.param(s.key)?;
                Some(match &s.columns {
                    Some(c) => m.rows() * c.len(),
                    None => m.len(),
                })
            })
            .sum()
    }
}

/// Trainable set for `stage`.
///
/// Stage 1 trains the experts added by the latest expansion together with the
/// router columns that score them. The first expansion creates the routers, so
/// there every column (including the one for the original FFN) is new and
/// trains; later expansions keep earlier columns frozen. Layers that gained no
/// experts in the latest expansion contribute nothing. Stage 1 on a model that
/// was never expanded has nothing to train and is an error.
pub fn partition_params(model: &MoeModel, stage: Stage) -> Result<Partition> {
    let trainable = match stage {
        Stage::Base => model
            .params()
            .into_iter()
            .map(|(key, _)| ParamSlice { key, columns: None })
            .collect(),
        Stage::Stage1 => {
            let mut out = Vec::new();
            let Some(latest) = model.history.len().checked_sub(1) else {
                return Err(Error::Configuration(
                    "stage 1 needs an expanded model; nothing is trainable".into(),
                ));
            };
            for l in 0..model.layer_count() {
                let experts = model.experts_of_expansion(l, latest);
                if experts.is_empty() {
                    continue;
                }
                for e in experts.clone() {
                    for key in [
                        ParamKey::ExpertGate(l, e),
                        ParamKey::ExpertUp(l, e),
                        ParamKey::ExpertDown(l, e),
                    ] {
                        out.push(ParamSlice { key, columns: None });
                    }
                }
                let columns = (latest > 0).then_some(experts);
                out.push(ParamSlice {
                    key: ParamKey::Router(l),
                    columns,
                });
            }
            out
        }
        Stage::Stage2 => model
            .params()
            .into_iter()
            .filter(|(key, _)| matches!(key, ParamKey::Router(_) | ParamKey::Classifier(_)))
            .map(|(key, _)| ParamSlice { key, columns: None })
            .collect(),
    };
    if trainable.is_empty() {
        return Err(Error::Configuration(format!("{stage:?} has no trainable parameters")));
    }
    Ok(Partition { stage, trainable })
}
