//! Losses, the staged training loops, lifelong expansion and evaluation.

mod eval;
mod lifelong;
mod losses;
mod optim;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use eval::{evaluate, LanguageMetrics, LayerRouting, Metrics};
pub use lifelong::{lifelong_expand, AllocationChoice, ExpansionConfig, ExpansionOutcome};
pub use losses::{balance_loss, cls_loss, lpr_loss, ntp_loss, ClsMode};
pub use optim::Adam;

use losses::{BatchMasks, LossTerms};

use crate::corpus::TaggedCorpus;
use crate::error::{Error, Result};
use crate::model::{partition_params, MoeModel, ParamKey, Partition, RoutingMode, Stage, TapeForward};
use crate::numerics::{Matrix, SeededRng, Tape};

/// Learning rate used for the paper-scale runs.
pub const PAPER_LEARNING_RATE: f64 = 5e-5;
/// Old:new sequences per language in the review mixture.
pub const REVIEW_RATIO: (usize, usize) = (1, 2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecipe {
    pub stage: Stage,
    /// Weight of the load-balance loss in stage 1.
    pub alpha: f64,
    /// Weight of the language-prior routing loss in stage 2.
    pub beta: f64,
    /// Weight of the routing-classifier loss in stage 2.
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub cls_mode: ClsMode,
}

impl TrainingRecipe {
    fn with_stage(stage: Stage) -> Self {
        Self {
            stage,
            alpha: 0.01,
            beta: 0.1,
            gamma: 0.1,
            learning_rate: PAPER_LEARNING_RATE,
            batch_size: 16,
            steps: 500,
            seed: 7,
            cls_mode: ClsMode::StandardCe,
        }
    }

    pub fn base() -> Self {
        Self::with_stage(Stage::Base)
    }

    pub fn stage1() -> Self {
        Self::with_stage(Stage::Stage1)
    }

    pub fn stage2() -> Self {
        Self::with_stage(Stage::Stage2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Configuration(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Configuration("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Configuration("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values of one step. `total` is the optimized objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub ntp: f64,
    pub balance: f64,
    pub lpr: f64,
    pub cls: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,total,ntp,balance,lpr,cls"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.ntp, self.balance, self.lpr, self.cls
        )
    }
}

pub fn loss_curve_csv(reports: &[LossReport]) -> String {
    let mut out = format!("{}\n", LossReport::csv_header());
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Loss of `batch` and its gradient for every parameter in `partition`.
/// Gradients of column-restricted parameters are zero outside the columns.
pub fn loss_and_grad(
    model: &MoeModel,
    batch: &[Vec<usize>],
    old_mask: &[Vec<bool>],
    recipe: &TrainingRecipe,
    partition: &Partition,
) -> Result<(LossReport, BTreeMap<ParamKey, Matrix>)> {
    let mut tape = Tape::new();
    let trainable = |k: ParamKey| partition.contains(k);
    let fwd = TapeForward::build(&mut tape, model, batch, &trainable, RoutingMode::Plain)?;
    let masks = BatchMasks::new(batch, old_mask);
    let terms = LossTerms::build(&mut tape, &fwd, &masks, model.config.top_k, recipe.cls_mode)?;
    let mut parts = vec![(terms.ntp, 1.0)];
    match recipe.stage {
        Stage::Base => {}
        Stage::Stage1 => parts.extend(terms.balance.map(|b| (b, recipe.alpha))),
        Stage::Stage2 => {
            parts.extend(terms.lpr.map(|l| (l, recipe.beta)));
            parts.extend(terms.cls.map(|c| (c, recipe.gamma)));
        }
    }
    let total = tape.lin_comb(parts)?;
    let value = |v: Option<_>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let report = LossReport {
        step: 0,
        total: tape.value(total).item(),
        ntp: tape.value(terms.ntp).item(),
        balance: value(terms.balance),
        lpr: value(terms.lpr),
        cls: value(terms.cls),
    };
    let mut grads = tape.backward(total)?;
    let mut out = BTreeMap::new();
    for slice in &partition.trainable {
        let leaf = fwd.leaves[&slice.key];
        let mut g = grads.take(leaf).unwrap_or_else(|| {
            let (r, c) = tape.value(leaf).shape();
            Matrix::zeros(r, c)
        });
        partition.mask(slice.key, &mut g);
        out.insert(slice.key, g);
    }
    Ok((report, out))
}

/// Loss of `batch` without gradients.
pub fn batch_loss(
    model: &MoeModel,
    batch: &[Vec<usize>],
    old_mask: &[Vec<bool>],
    recipe: &TrainingRecipe,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let fwd = TapeForward::build(&mut tape, model, batch, &|_| false, RoutingMode::Plain)?;
    let masks = BatchMasks::new(batch, old_mask);
    let terms = LossTerms::build(&mut tape, &fwd, &masks, model.config.top_k, recipe.cls_mode)?;
    let value = |v: Option<_>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let (ntp, balance, lpr, cls) = (
        tape.value(terms.ntp).item(),
        value(terms.balance),
        value(terms.lpr),
        value(terms.cls),
    );
    let total = match recipe.stage {
        Stage::Base => ntp,
        Stage::Stage1 => ntp + recipe.alpha * balance,
        Stage::Stage2 => ntp + recipe.beta * lpr + recipe.gamma * cls,
    };
    Ok(LossReport {
        step: 0,
        total,
        ntp,
        balance,
        lpr,
        cls,
    })
}

fn train(
    mut model: MoeModel,
    corpus: &TaggedCorpus,
    old_groups: &BTreeSet<String>,
    recipe: &TrainingRecipe,
) -> Result<(MoeModel, Vec<LossReport>)> {
    recipe.validate()?;
    let partition = partition_params(&model, recipe.stage)?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    corpus.check_vocab(model.config.vocab)?;
    let len = corpus.sequences[0].tokens.len();
    if corpus.sequences.iter().any(|s| s.tokens.len() != len) {
        return Err(Error::InvalidInput("training sequences must share one length".into()));
    }
    let mask = corpus.old_mask(old_groups);
    let mut rng = SeededRng::new(recipe.seed);
    let mut adam = Adam::new(recipe.learning_rate);
    let mut reports = Vec::with_capacity(recipe.steps);
    for step in 0..recipe.steps {
        let picks: Vec<usize> = (0..recipe.batch_size).map(|_| rng.below(corpus.len())).collect();
        let batch: Vec<Vec<usize>> = picks.iter().map(|&i| corpus.sequences[i].tokens.clone()).collect();
        let batch_mask: Vec<Vec<bool>> = picks.iter().map(|&i| mask[i].clone()).collect();
        let (mut report, grads) = loss_and_grad(&model, &batch, &batch_mask, recipe, &partition)?;
        report.step = step;
        adam.step(&mut model, &partition, &grads);
        reports.push(report);
    }
    Ok((model, reports))
}

/// Dense pretraining with next-token loss only.
pub fn train_base(
    model: MoeModel,
    corpus: &TaggedCorpus,
    recipe: &TrainingRecipe,
) -> Result<(MoeModel, Vec<LossReport>)> {
    if recipe.stage != Stage::Base {
        return Err(Error::Configuration("base training needs a base recipe".into()));
    }
    train(model, corpus, &BTreeSet::new(), recipe)
}

/// Trains the newest experts and their router columns on new-language data
/// with `NTP + α·balance`.
pub fn stage1_train(
    model: MoeModel,
    corpus_new: &TaggedCorpus,
    recipe: &TrainingRecipe,
) -> Result<(MoeModel, Vec<LossReport>)> {
    if recipe.stage != Stage::Stage1 {
        return Err(Error::Configuration("stage 1 needs a stage-1 recipe".into()));
    }
    let group = model
        .history
        .last()
        .map(|e| e.group.clone())
        .ok_or_else(|| Error::Configuration("stage 1 needs an expanded model".into()))?;
    if corpus_new.groups().iter().any(|g| *g != group) {
        return Err(Error::InvalidInput(format!(
            "stage-1 corpus must only hold group {group}"
        )));
    }
    train(model, corpus_new, &BTreeSet::new(), recipe)
}

/// Installs zero-initialized classifiers on `classifier_layers` and trains
/// routers and classifiers on review data with `NTP + β·LPR + γ·CLS`.
/// Tokens of `old_groups` count as old.
pub fn stage2_train(
    mut model: MoeModel,
    review: &TaggedCorpus,
    recipe: &TrainingRecipe,
    classifier_layers: &[usize],
    old_groups: &BTreeSet<String>,
) -> Result<(MoeModel, Vec<LossReport>)> {
    if recipe.stage != Stage::Stage2 {
        return Err(Error::Configuration("stage 2 needs a stage-2 recipe".into()));
    }
    if model.history.is_empty() {
        return Err(Error::Configuration("stage 2 needs an expanded model".into()));
    }
    if recipe.gamma > 0.0 && classifier_layers.is_empty() {
        return Err(Error::Configuration("gamma > 0 but no classifier layers".into()));
    }
    if !review.sequences.iter().any(|s| old_groups.contains(&s.group)) {
        return Err(Error::InvalidInput("review corpus has no old-language tokens".into()));
    }
    model.reset_classifiers(classifier_layers)?;
    train(model, review, old_groups, recipe)
}
