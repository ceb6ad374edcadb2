use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{stage1_train, stage2_train, LossReport, TrainingRecipe, REVIEW_RATIO};
use crate::allocator::{allocate, AllocationPlan};
use crate::corpus::{review_mixture, TaggedCorpus};
use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::profiler::{model_id, profile, select_classifier_layers, NewNewDenominator, SimilarityProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationChoice {
    /// New experts in inverse proportion to the profiled similarity.
    #[default]
    LayerWise,
    /// `budget / layers` new experts in every layer.
    Uniform,
}

/// Settings for adding one language group to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    pub group: String,
    pub budget: usize,
    pub q: usize,
    pub profile_seed: u64,
    #[serde(default)]
    pub denominator: NewNewDenominator,
    /// Number of highest-similarity layers that get a routing classifier;
    /// 0 disables classifiers.
    pub classifier_layers: usize,
    /// Old:new sequences per language in the review data.
    pub review_ratio: (usize, usize),
    pub review_seed: u64,
    #[serde(default)]
    pub allocation: AllocationChoice,
    pub stage1: TrainingRecipe,
    pub stage2: TrainingRecipe,
}

impl ExpansionConfig {
    pub fn new(group: impl Into<String>, budget: usize) -> Self {
        Self {
            group: group.into(),
            budget,
            q: crate::profiler::DEFAULT_Q,
            profile_seed: 11,
            denominator: NewNewDenominator::default(),
            classifier_layers: crate::profiler::DEFAULT_CLASSIFIER_LAYERS_SINGLE,
            review_ratio: REVIEW_RATIO,
            review_seed: 13,
            allocation: AllocationChoice::LayerWise,
            stage1: TrainingRecipe::stage1(),
            stage2: TrainingRecipe::stage2(),
        }
    }

    /// Defaults for the second and later expansions of a lifelong run, which
    /// place fewer classifiers.
    pub fn lifelong(group: impl Into<String>, budget: usize) -> Self {
        Self {
            classifier_layers: crate::profiler::DEFAULT_CLASSIFIER_LAYERS_LIFELONG,
            ..Self::new(group, budget)
        }
    }

    /// Settings tuned for the toy model (`ModelConfig::toy`): three
    /// classifier layers and learning rates suited to a few hundred steps.
    pub fn toy(group: impl Into<String>, budget: usize) -> Self {
        Self {
            classifier_layers: 3,
            stage1: TrainingRecipe {
                learning_rate: 3e-3,
                ..TrainingRecipe::stage1()
            },
            stage2: TrainingRecipe {
                learning_rate: 1e-2,
                ..TrainingRecipe::stage2()
            },
            ..Self::new(group, budget)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpansionOutcome {
    /// Similarity of the input model, which drives allocation.
    pub profile: SimilarityProfile,
    pub plan: AllocationPlan,
    pub stage1_model: MoeModel,
    pub stage1_reports: Vec<LossReport>,
    /// Similarity of the stage-1 model, which places the classifiers.
    pub stage1_profile: Option<SimilarityProfile>,
    pub review: TaggedCorpus,
    pub model: MoeModel,
    pub stage2_reports: Vec<LossReport>,
}

/// Profiles, allocates, upcycles and runs both training stages for one new
/// language group. `old` holds every previously learned language and `new`
/// only the languages of `config.group`.
pub fn lifelong_expand(
    model: &MoeModel,
    old: &TaggedCorpus,
    new: &TaggedCorpus,
    config: &ExpansionConfig,
) -> Result<ExpansionOutcome> {
    if new.groups().iter().any(|g| *g != config.group) || new.is_empty() {
        return Err(Error::InvalidInput(format!(
            "new corpus must be non-empty and only hold group {}",
            config.group
        )));
    }
    let old_groups: BTreeSet<String> = old.groups();
    if old_groups.contains(&config.group) {
        return Err(Error::InvalidInput(format!("group {} is already learned", config.group)));
    }
    let m = model.layer_count();
    if config.classifier_layers > m {
        return Err(Error::Configuration(format!(
            "{} classifier layers requested for a {m}-layer model",
            config.classifier_layers
        )));
    }
    let input_profile = profile(
        model,
        &old.concat(new),
        &old.languages(),
        &new.languages(),
        config.q,
        config.profile_seed,
        config.denominator,
    )?;
    let mut plan = match config.allocation {
        AllocationChoice::LayerWise => allocate(&input_profile.indicated(), config.budget)?,
        AllocationChoice::Uniform => {
            if !config.budget.is_multiple_of(m) || config.budget == 0 {
                return Err(Error::Budget {
                    budget: config.budget,
                    layers: m,
                });
            }
            AllocationPlan::uniform(m, config.budget / m)
        }
    };
    plan.mode.profile = Some(model_id(model)?);

    let expanded = model.upcycle(&plan, &config.group)?;
    let (stage1_model, stage1_reports) = stage1_train(expanded, new, &config.stage1)?;
    let stage1_profile = if config.classifier_layers == 0 {
        None
    } else {
        let p = profile(
            &stage1_model,
            &old.concat(new),
            &old.languages(),
            &new.languages(),
            config.q,
            config.profile_seed,
            config.denominator,
        )?;
        plan.classifier_layers = select_classifier_layers(&p.new_old(), config.classifier_layers)?;
        Some(p)
    };
    let (ratio_old, ratio_new) = config.review_ratio;
    let review = review_mixture(old, new, ratio_old, ratio_new, config.review_seed)?;
    let (model, stage2_reports) = stage2_train(
        stage1_model.clone(),
        &review,
        &config.stage2,
        &plan.classifier_layers,
        &old_groups,
    )?;
    Ok(ExpansionOutcome {
        profile: input_profile,
        plan,
        stage1_model,
        stage1_reports,
        stage1_profile,
        review,
        model,
        stage2_reports,
    })
}
