//! Dense model on language A, then a layer-wise expansion for language B.

use std::collections::BTreeSet;
use std::time::Instant;

use layermoe::cli::CorpusConfig;
use layermoe::model::{ModelConfig, MoeModel, RoutingMode};
use layermoe::trainer::{evaluate, lifelong_expand, train_base, ExpansionConfig, TrainingRecipe};

fn main() -> layermoe::Result<()> {
    let start = Instant::now();
    let corpus = CorpusConfig::default();
    let train = corpus.build()?;
    let held_out = corpus.build_with(4_096, 3)?;
    let old = train.in_groups(&["g0"]);
    let new = train.in_groups(&["g1"]);

    let base = TrainingRecipe {
        learning_rate: 3e-3,
        steps: 600,
        ..TrainingRecipe::base()
    };
    let (dense, _) = train_base(MoeModel::dense(ModelConfig::toy())?, &old, &base)?;
    let olds: BTreeSet<String> = ["g0".to_string()].into();
    let show = |name: &str, m: &MoeModel, mode| -> layermoe::Result<layermoe::trainer::Metrics> {
        let e = evaluate(m, &held_out, mode, &olds)?;
        println!(
            "{name:<14} a {:10.3}  b {:10.3}  ({:.0?})",
            e.languages["a"].perplexity,
            e.languages["b"].perplexity,
            start.elapsed()
        );
        Ok(e)
    };
    show("dense", &dense, RoutingMode::Plain)?;

    let out = lifelong_expand(&dense, &old, &new, &ExpansionConfig::toy("g1", 8))?;
    println!("similarity {:.4?}", out.profile.indicated());
    println!("plan {:?}, classifiers on {:?}", out.plan.new_experts(), out.plan.classifier_layers);
    show("stage 1", &out.stage1_model, RoutingMode::Plain)?;
    show("stage 2 plain", &out.model, RoutingMode::Plain)?;
    let gated = show("stage 2 gated", &out.model, RoutingMode::Gated)?;
    for l in &gated.layers {
        println!(
            "layer {}: old->E0 {:.3?}  new->E0 {:.3?}  classifier accuracy {:.3?}",
            l.layer, l.old_to_e0, l.new_to_e0, l.classifier_accuracy
        );
    }
    Ok(())
}
