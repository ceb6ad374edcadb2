//! Two expansions in sequence: G0 -> G1 -> G2. Each expansion treats every
//! earlier group as old.

use std::collections::BTreeSet;

use layermoe::cli::{CorpusConfig, LanguageEntry};
use layermoe::model::{ModelConfig, MoeModel, RoutingMode};
use layermoe::trainer::{evaluate, lifelong_expand, train_base, ExpansionConfig, TrainingRecipe};

fn main() -> layermoe::Result<()> {
    let lang = |id: &str, group: &str| LanguageEntry {
        id: id.into(),
        group: group.into(),
    };
    let corpus = CorpusConfig {
        languages: vec![lang("a", "g0"), lang("b", "g1"), lang("c", "g2")],
        ..CorpusConfig::default()
    };
    let train = corpus.build()?;
    let held_out = corpus.build_with(2_048, 3)?;

    let base = TrainingRecipe {
        learning_rate: 3e-3,
        steps: 600,
        ..TrainingRecipe::base()
    };
    let (mut model, _) = train_base(MoeModel::dense(ModelConfig::toy())?, &train.in_groups(&["g0"]), &base)?;
    let mut learned = vec!["g0"];
    for group in ["g1", "g2"] {
        let config = ExpansionConfig::toy(group, 8);
        let old = train.in_groups(&learned);
        let out = lifelong_expand(&model, &old, &train.in_groups(&[group]), &config)?;
        println!(
            "{group}: plan {:?}, classifiers {:?}, experts now {:?}",
            out.plan.new_experts(),
            out.plan.classifier_layers,
            out.model.expert_counts()
        );
        let olds: BTreeSet<String> = learned.iter().map(|g| g.to_string()).collect();
        learned.push(group);
        let metrics = evaluate(&out.model, &held_out.in_groups(&learned), RoutingMode::Gated, &olds)?;
        for (name, m) in &metrics.languages {
            println!("  {name} ({}): ppl {:.3}", m.group, m.perplexity);
        }
        model = out.model;
    }
    println!("history: {:?}", model.history);
    Ok(())
}
