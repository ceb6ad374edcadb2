use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Artifacts;
use crate::allocator::{allocate as allocate_plan, AllocationPlan};
use crate::corpus::{generate, layout_languages, review_mixture, TaggedCorpus, BOS};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelConfig, MoeModel, RoutingMode};
use crate::profiler::{
    profile as profile_similarity, select_classifier_layers, NewNewDenominator, SimilarityProfile, DEFAULT_Q,
};
use crate::trainer::{
    evaluate, loss_curve_csv, stage1_train, stage2_train, train_base as train_dense, AllocationChoice,
    ExpansionConfig, TrainingRecipe,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEntry {
    pub id: String,
    pub group: String,
}

/// Synthetic corpus layout and sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub languages: Vec<LanguageEntry>,
    pub block_len: usize,
    pub shared_len: usize,
    pub overlap: f64,
    pub layout_seed: u64,
    pub tokens_per_language: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let lang = |id: &str, group: &str| LanguageEntry {
            id: id.into(),
            group: group.into(),
        };
        Self {
            languages: vec![lang("a", "g0"), lang("b", "g1")],
            block_len: 24,
            shared_len: 0,
            overlap: 0.0,
            layout_seed: 1,
            tokens_per_language: 32_000,
            context: 32,
            seed: 2,
        }
    }
}

impl CorpusConfig {
    pub fn build(&self) -> Result<TaggedCorpus> {
        self.build_with(self.tokens_per_language, self.seed)
    }

    /// Same languages, different size and sampling seed (e.g. held-out data).
    pub fn build_with(&self, tokens_per_language: usize, seed: u64) -> Result<TaggedCorpus> {
        let pairs: Vec<(&str, &str)> = self
            .languages
            .iter()
            .map(|l| (l.id.as_str(), l.group.as_str()))
            .collect();
        let specs = layout_languages(&pairs, self.block_len, self.shared_len, self.overlap, self.layout_seed);
        generate(&specs, tokens_per_language, self.context, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCorpusConfig {
    pub corpus: CorpusConfig,
    pub out: PathBuf,
}

impl Default for GenCorpusConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            out: "corpus.jsonl".into(),
        }
    }
}

pub(crate) fn toy_base_recipe() -> TrainingRecipe {
    TrainingRecipe {
        learning_rate: 3e-3,
        steps: 600,
        ..TrainingRecipe::base()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBaseConfig {
    pub corpus: PathBuf,
    /// Groups the dense model learns.
    pub groups: Vec<String>,
    pub model: ModelConfig,
    pub recipe: TrainingRecipe,
    pub out: PathBuf,
}

impl Default for TrainBaseConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            groups: vec!["g0".into()],
            model: ModelConfig::toy(),
            recipe: toy_base_recipe(),
            out: "base.lmoe".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub model: PathBuf,
    pub corpus: PathBuf,
    /// Old groups.
    pub old: Vec<String>,
    /// New groups.
    pub new: Vec<String>,
    pub q: usize,
    pub seed: u64,
    pub denominator: NewNewDenominator,
    pub out: PathBuf,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            model: "base.lmoe".into(),
            corpus: "corpus.jsonl".into(),
            old: vec!["g0".into()],
            new: vec!["g1".into()],
            q: DEFAULT_Q,
            seed: 11,
            denominator: NewNewDenominator::default(),
            out: "profile.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocateConfig {
    pub profile: PathBuf,
    pub budget: usize,
    pub allocation: AllocationChoice,
    /// Classifier layers chosen from the profile; 0 leaves the set empty.
    pub classifier_layers: usize,
    pub out: PathBuf,
}

impl Default for AllocateConfig {
    fn default() -> Self {
        Self {
            profile: "profile.json".into(),
            budget: 8,
            allocation: AllocationChoice::LayerWise,
            classifier_layers: 0,
            out: "plan.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandConfig {
    pub model: PathBuf,
    pub plan: PathBuf,
    pub corpus: PathBuf,
    /// Group added by this expansion; its languages form the stage-1 data.
    pub group: String,
    pub recipe: TrainingRecipe,
    pub out: PathBuf,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            model: "base.lmoe".into(),
            plan: "plan.json".into(),
            corpus: "corpus.jsonl".into(),
            group: "g1".into(),
            recipe: ExpansionConfig::toy("g1", 8).stage1,
            out: "stage1.lmoe".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub old: Vec<String>,
    pub new: Vec<String>,
    /// Number of highest-similarity layers, measured on the input model,
    /// that get classifiers. Ignored when `classifier_layers` is set.
    pub classifier_count: usize,
    pub classifier_layers: Option<Vec<usize>>,
    pub q: usize,
    pub profile_seed: u64,
    pub denominator: NewNewDenominator,
    pub review_ratio: (usize, usize),
    pub review_seed: u64,
    pub recipe: TrainingRecipe,
    pub out: PathBuf,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        let toy = ExpansionConfig::toy("g1", 8);
        Self {
            model: "stage1.lmoe".into(),
            corpus: "corpus.jsonl".into(),
            old: vec!["g0".into()],
            new: vec!["g1".into()],
            classifier_count: toy.classifier_layers,
            classifier_layers: None,
            q: toy.q,
            profile_seed: toy.profile_seed,
            denominator: toy.denominator,
            review_ratio: toy.review_ratio,
            review_seed: toy.review_seed,
            recipe: toy.stage2,
            out: "model.lmoe".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub old: Vec<String>,
    pub mode: RoutingMode,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            model: "model.lmoe".into(),
            corpus: "corpus.jsonl".into(),
            old: vec!["g0".into()],
            mode: RoutingMode::Gated,
            out: "metrics.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteStatsConfig {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub mode: RoutingMode,
    pub out: PathBuf,
}

impl Default for RouteStatsConfig {
    fn default() -> Self {
        Self {
            model: "model.lmoe".into(),
            corpus: "corpus.jsonl".into(),
            mode: RoutingMode::Gated,
            out: "route_stats.json".into(),
        }
    }
}

/// Runs `load` on `path`, naming the file in I/O errors.
pub(crate) fn read<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// `path` with its extension replaced, e.g. `a.json` -> `a.csv`.
pub(crate) fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents)?;
    Ok(())
}

/// Languages of `corpus` that belong to `groups`, in corpus order.
pub(crate) fn languages_of(corpus: &TaggedCorpus, groups: &[String]) -> Result<Vec<String>> {
    let wanted: BTreeSet<&String> = groups.iter().collect();
    let langs: Vec<String> = corpus
        .languages()
        .into_iter()
        .filter(|l| {
            corpus
                .sequences
                .iter()
                .any(|s| &s.lang == l && wanted.contains(&s.group))
        })
        .collect();
    if langs.is_empty() {
        return Err(Error::InvalidInput(format!("corpus has no languages in groups {groups:?}")));
    }
    Ok(langs)
}

fn subset(corpus: &TaggedCorpus, groups: &[String]) -> TaggedCorpus {
    corpus.filter(|s| groups.contains(&s.group))
}

pub(crate) fn gen_corpus(c: &GenCorpusConfig) -> Result<Artifacts> {
    let corpus = c.corpus.build()?;
    ensure_parent(&c.out)?;
    corpus.save(&c.out)?;
    Ok(Artifacts {
        inputs: vec![],
        outputs: vec![c.out.clone()],
        manifest: sibling(&c.out, "manifest.json"),
    })
}

pub(crate) fn train_base(c: &TrainBaseConfig) -> Result<Artifacts> {
    let corpus = subset(&read(&c.corpus, |p| TaggedCorpus::load(p))?, &c.groups);
    let (model, reports) = train_dense(MoeModel::dense(c.model.clone())?, &corpus, &c.recipe)?;
    ensure_parent(&c.out)?;
    model.save(&c.out)?;
    let curve = sibling(&c.out, "loss.csv");
    write(&curve, loss_curve_csv(&reports))?;
    Ok(Artifacts {
        inputs: vec![c.corpus.clone()],
        outputs: vec![c.out.clone(), curve],
        manifest: sibling(&c.out, "manifest.json"),
    })
}

pub(crate) fn profile(c: &ProfileConfig) -> Result<Artifacts> {
    let model = read(&c.model, |p| MoeModel::load(p))?;
    let corpus = read(&c.corpus, |p| TaggedCorpus::load(p))?;
    let old = languages_of(&corpus, &c.old)?;
    let new = languages_of(&corpus, &c.new)?;
    let p = profile_similarity(&model, &corpus, &old, &new, c.q, c.seed, c.denominator)?;
    ensure_parent(&c.out)?;
    p.save(&c.out)?;
    let csv = sibling(&c.out, "csv");
    write(&csv, p.to_csv())?;
    Ok(Artifacts {
        inputs: vec![c.model.clone(), c.corpus.clone()],
        outputs: vec![c.out.clone(), csv],
        manifest: sibling(&c.out, "manifest.json"),
    })
}

pub(crate) fn allocate(c: &AllocateConfig) -> Result<Artifacts> {
    let p = read(&c.profile, |p| SimilarityProfile::load(p))?;
    let m = p.layers.len();
    let mut plan = match c.allocation {
        AllocationChoice::LayerWise => allocate_plan(&p.indicated(), c.budget)?,
        AllocationChoice::Uniform => {
            if c.budget == 0 || !c.budget.is_multiple_of(m) {
                return Err(Error::Budget {
                    budget: c.budget,
                    layers: m,
                });
            }
            AllocationPlan::uniform(m, c.budget / m)
        }
    };
    plan.mode.profile = Some(p.meta.model_id.clone());
    if c.classifier_layers > 0 {
        plan.classifier_layers = select_classifier_layers(&p.new_old(), c.classifier_layers)?;
    }
    ensure_parent(&c.out)?;
    plan.save(&c.out)?;
    Ok(Artifacts {
        inputs: vec![c.profile.clone()],
        outputs: vec![c.out.clone()],
        manifest: sibling(&c.out, "manifest.json"),
    })
}

pub(crate) fn expand(c: &ExpandConfig) -> Result<Artifacts> {
    let model = read(&c.model, |p| MoeModel::load(p))?;
    let plan = read(&c.plan, |p| AllocationPlan::load(p))?;
    let corpus = read(&c.corpus, |p| TaggedCorpus::load(p))?;
    let new = subset(&corpus, std::slice::from_ref(&c.group));
    let expanded = model.upcycle(&plan, &c.group)?;
    let (model, reports) = stage1_train(expanded, &new, &c.recipe)?;
    ensure_parent(&c.out)?;
    model.save(&c.out)?;
    let curve = sibling(&c.out, "loss.csv");
    write(&curve, loss_curve_csv(&reports))?;
    Ok(Artifacts {
        inputs: vec![c.model.clone(), c.plan.clone(), c.corpus.clone()],
        outputs: vec![c.out.clone(), curve],
        manifest: sibling(&c.out, "manifest.json"),
    })
}

pub(crate) fn review(c: &ReviewConfig) -> Result<Artifacts> {
    let model = read(&c.model, |p| MoeModel::load(p))?;
    let corpus = read(&c.corpus, |p| TaggedCorpus::load(p))?;
    let old = subset(&corpus, &c.old);
    let new = subset(&corpus, &c.new);
    let layers = match &c.classifier_layers {
        Some(layers) => layers.clone(),
        None if c.classifier_count == 0 => Vec::new(),
        None => {
            let p = profile_similarity(
                &model,
                &old.concat(&new),
                &languages_of(&corpus, &c.old)?,
                &languages_of(&corpus, &c.new)?,
                c.q,
                c.profile_seed,
                c.denominator,
            )?;
            select_classifier_layers(&p.new_old(), c.classifier_count)?
        }
    };
    let review = review_mixture(&old, &new, c.review_ratio.0, c.review_ratio.1, c.review_seed)?;
    let olds: BTreeSet<String> = c.old.iter().cloned().collect();
    let (model, reports) = stage2_train(model, &review, &c.recipe, &layers, &olds)?;
    ensure_parent(&c.out)?;
    model.save(&c.out)?;
    let curve = sibling(&c.out, "loss.csv");
    write(&curve, loss_curve_csv(&reports))?;
    Ok(Artifacts {
        inputs: vec![c.model.clone(), c.corpus.clone()],
        outputs: vec![c.out.clone(), curve],
        manifest: sibling(&c.out, "manifest.json"),
    })
}

/// Writes metrics JSON plus per-language and routing CSVs next to `out`.
pub(crate) fn write_metrics(metrics: &crate::trainer::Metrics, out: &Path) -> Result<Vec<PathBuf>> {
    write(out, metrics.to_json()?)?;
    let langs = sibling(out, "languages.csv");
    write(&langs, metrics.languages_csv())?;
    let routing = sibling(out, "routing.csv");
    write(&routing, metrics.routing_csv())?;
    Ok(vec![out.to_path_buf(), langs, routing])
}

pub(crate) fn eval(c: &EvalConfig) -> Result<Artifacts> {
    let model = read(&c.model, |p| MoeModel::load(p))?;
    let corpus = read(&c.corpus, |p| TaggedCorpus::load(p))?;
    let olds: BTreeSet<String> = c.old.iter().cloned().collect();
    let metrics = evaluate(&model, &corpus, c.mode, &olds)?;
    Ok(Artifacts {
        inputs: vec![c.model.clone(), c.corpus.clone()],
        outputs: write_metrics(&metrics, &c.out)?,
        manifest: sibling(&c.out, "manifest.json"),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageRoutes {
    /// Non-BOS tokens counted.
    pub tokens: usize,
    /// Times each expert was the top-1 choice.
    pub top1: Vec<usize>,
    /// Times each expert was among the selected experts.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRoutes {
    pub layer: usize,
    pub experts: usize,
    pub classifier: bool,
    pub languages: BTreeMap<String, LanguageRoutes>,
}

pub(crate) fn route_histograms(model: &MoeModel, corpus: &TaggedCorpus, mode: RoutingMode) -> Result<Vec<LayerRoutes>> {
    corpus.check_vocab(model.config.vocab)?;
    let counts = model.expert_counts();
    let classifiers = model.classifier_layers();
    let mut layers: Vec<LayerRoutes> = counts
        .iter()
        .enumerate()
        .map(|(layer, &n)| LayerRoutes {
            layer,
            experts: n,
            classifier: classifiers.contains(&layer),
            languages: BTreeMap::new(),
        })
        .collect();
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.sequences.iter().enumerate() {
        by_len.entry(s.tokens.len()).or_default().push(i);
    }
    for ids in by_len.values() {
        for chunk in ids.chunks(32) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus.sequences[i].tokens.clone()).collect();
            let outs = forward_batch(model, &batch, mode)?;
            for (&i, out) in chunk.iter().zip(&outs) {
                let seq = &corpus.sequences[i];
                for (layer, routes) in out.routes.iter().enumerate() {
                    let n = counts[layer];
                    let entry = layers[layer]
                        .languages
                        .entry(seq.lang.clone())
                        .or_insert_with(|| LanguageRoutes {
                            tokens: 0,
                            top1: vec![0; n],
                            selected: vec![0; n],
                        });
                    for (t, r) in routes.iter().enumerate() {
                        if seq.tokens[t] == BOS {
                            continue;
                        }
                        entry.tokens += 1;
                        entry.top1[r.experts[0]] += 1;
                        for &e in &r.experts {
                            entry.selected[e] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(layers)
}

pub(crate) fn route_stats(c: &RouteStatsConfig) -> Result<Artifacts> {
    let model = read(&c.model, |p| MoeModel::load(p))?;
    let corpus = read(&c.corpus, |p| TaggedCorpus::load(p))?;
    let layers = route_histograms(&model, &corpus, c.mode)?;
    write(&c.out, serde_json::to_string_pretty(&layers)?)?;
    let mut csv = String::from("layer,language,expert,top1,selected\n");
    for l in &layers {
        for (lang, r) in &l.languages {
            for e in 0..l.experts {
                csv.push_str(&format!("{},{lang},{e},{},{}\n", l.layer, r.top1[e], r.selected[e]));
            }
        }
    }
    let csv_path = sibling(&c.out, "csv");
    write(&csv_path, csv)?;
    Ok(Artifacts {
        inputs: vec![c.model.clone(), c.corpus.clone()],
        outputs: vec![c.out.clone(), csv_path],
        manifest: sibling(&c.out, "manifest.json"),
    })
}
