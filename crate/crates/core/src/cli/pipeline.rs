use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::commands::{ensure_parent, toy_base_recipe, write, write_metrics, CorpusConfig};
use super::{merge, resolve_value, Artifacts, Common};
use crate::corpus::TaggedCorpus;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeModel, RoutingMode};
use crate::trainer::{evaluate, lifelong_expand, loss_curve_csv, train_base, ExpansionConfig, TrainingRecipe};

/// A dense base model followed by one or more expansions. One expansion is
/// the single-expansion setting; several run the lifelong setting, each
/// treating all earlier groups as old.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    /// Size and seed of the held-out evaluation corpus.
    pub eval_tokens_per_language: usize,
    pub eval_seed: u64,
    pub model: ModelConfig,
    pub base_groups: Vec<String>,
    pub base: TrainingRecipe,
    pub expansions: Vec<ExpansionConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: "run".into(),
            corpus: CorpusConfig::default(),
            eval_tokens_per_language: 4_096,
            eval_seed: 3,
            model: ModelConfig::toy(),
            base_groups: vec!["g0".into()],
            base: toy_base_recipe(),
            expansions: vec![ExpansionConfig::toy("g1", 8)],
        }
    }
}

/// Like [`super::resolve`], but each entry of `expansions` is completed from
/// the toy expansion template, so config files only list what differs.
pub(crate) fn resolve_pipeline(
    common: &Common,
    flags: Vec<(String, Value)>,
    env: &[(String, String)],
) -> Result<(PipelineConfig, Value)> {
    let mut value = resolve_value(
        "run-pipeline",
        serde_json::to_value(PipelineConfig::default())?,
        common,
        flags,
        env,
    )?;
    if let Some(Value::Array(items)) = value.get_mut("expansions") {
        for item in items.iter_mut() {
            let mut full = serde_json::to_value(ExpansionConfig::toy("g1", 8))?;
            merge(&mut full, item.take());
            *item = full;
        }
    }
    let config: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::Configuration(e.to_string()))?;
    let resolved = serde_json::to_value(&config)?;
    Ok((config, resolved))
}

fn subset(corpus: &TaggedCorpus, groups: &[String]) -> TaggedCorpus {
    corpus.filter(|s| groups.contains(&s.group))
}

/// Runs the whole recipe and writes every artifact under `out_dir`.
pub fn run_pipeline(c: &PipelineConfig) -> Result<Artifacts> {
    if c.expansions.is_empty() {
        return Err(Error::Configuration("pipeline needs at least one expansion".into()));
    }
    std::fs::create_dir_all(&c.out_dir)?;
    let path = |name: &str| c.out_dir.join(name);
    let mut outputs = Vec::new();

    let train = c.corpus.build()?;
    let held_out = c.corpus.build_with(c.eval_tokens_per_language, c.eval_seed)?;
    for (name, corpus) in [("corpus.jsonl", &train), ("heldout.jsonl", &held_out)] {
        corpus.save(path(name))?;
        outputs.push(path(name));
    }

    let (mut model, reports) = train_base(MoeModel::dense(c.model.clone())?, &subset(&train, &c.base_groups), &c.base)?;
    model.save(path("base.lmoe"))?;
    write(&path("base.loss.csv"), loss_curve_csv(&reports))?;
    outputs.extend([path("base.lmoe"), path("base.loss.csv")]);
    let mut learned = c.base_groups.clone();
    let base_eval = evaluate(&model, &subset(&held_out, &learned), RoutingMode::Plain, &BTreeSet::new())?;
    outputs.extend(write_metrics(&base_eval, &path("metrics_base.json"))?);

    for (i, exp) in c.expansions.iter().enumerate() {
        let tag = format!("{}_{}", i + 1, exp.group);
        let old = subset(&train, &learned);
        let new = subset(&train, std::slice::from_ref(&exp.group));
        let out = lifelong_expand(&model, &old, &new, exp)?;

        let mut files = vec![
            (format!("profile_{tag}.json"), out.profile.to_json()?),
            (format!("profile_{tag}.csv"), out.profile.to_csv()),
            (format!("plan_{tag}.json"), out.plan.to_json()?),
            (format!("stage1_{tag}.loss.csv"), loss_curve_csv(&out.stage1_reports)),
            (format!("model_{tag}.loss.csv"), loss_curve_csv(&out.stage2_reports)),
        ];
        if let Some(p) = &out.stage1_profile {
            files.push((format!("stage1_profile_{tag}.json"), p.to_json()?));
        }
        for (name, contents) in files {
            write(&path(&name), contents)?;
            outputs.push(path(&name));
        }
        for (name, m) in [(format!("stage1_{tag}.lmoe"), &out.stage1_model), (format!("model_{tag}.lmoe"), &out.model)] {
            m.save(path(&name))?;
            outputs.push(path(&name));
        }

        let olds: BTreeSet<String> = learned.iter().cloned().collect();
        learned.push(exp.group.clone());
        let eval_set = subset(&held_out, &learned);
        for (suffix, m, mode) in [
            ("stage1", &out.stage1_model, RoutingMode::Plain),
            ("plain", &out.model, RoutingMode::Plain),
            ("gated", &out.model, RoutingMode::Gated),
        ] {
            let metrics = evaluate(m, &eval_set, mode, &olds)?;
            outputs.extend(write_metrics(&metrics, &path(&format!("metrics_{tag}_{suffix}.json")))?);
        }
        model = out.model;
    }
    let manifest = path("manifest.json");
    ensure_parent(&manifest)?;
    Ok(Artifacts {
        inputs: vec![],
        outputs,
        manifest,
    })
}
