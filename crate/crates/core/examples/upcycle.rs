//! Turning a dense model into an MoE model and what each stage may train.

use layermoe::allocator::{AllocationPlan, AllocationStrategy};
use layermoe::corpus::{generate, layout_languages};
use layermoe::model::{forward, partition_params, ModelConfig, MoeModel, RoutingMode, Stage};

fn main() -> layermoe::Result<()> {
    let dense = MoeModel::dense(ModelConfig::toy())?;
    println!("dense: {} parameters, experts {:?}", dense.parameter_count(), dense.expert_counts());

    let plan = AllocationPlan::from_counts(&[3, 2, 2, 1], AllocationStrategy::External);
    let moe = dense.upcycle(&plan, "g1")?;
    println!("after g1: {} parameters, experts {:?}", moe.parameter_count(), moe.expert_counts());
    let moe2 = moe.upcycle(&AllocationPlan::uniform(4, 1), "g2")?;
    println!("after g2: experts {:?}", moe2.expert_counts());
    for l in 0..moe2.layer_count() {
        println!(
            "  layer {l}: g1 experts {:?}, g2 experts {:?}",
            moe2.experts_of_expansion(l, 0),
            moe2.experts_of_expansion(l, 1)
        );
    }

    for stage in [Stage::Base, Stage::Stage1, Stage::Stage2] {
        let part = partition_params(&moe2, stage)?;
        println!("{stage:?}: {} trainable scalars", part.scalar_count(&moe2));
    }

    // routers start at zero, so the new experts share the original's weight
    // evenly with it; expert copies start close to the original
    let specs = layout_languages(&[("a", "g0")], 24, 0, 0.0, 1);
    let tokens = generate(&specs, 32, 32, 2)?.sequences[0].tokens.clone();
    let before = forward(&dense, &tokens, RoutingMode::Plain)?;
    let after = forward(&moe, &tokens, RoutingMode::Plain)?;
    let drift = before
        .logits
        .data()
        .iter()
        .zip(after.logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("largest logit change from upcycling: {drift:.2e}");
    Ok(())
}
