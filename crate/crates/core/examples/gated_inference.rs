//! Per-token routing with and without the classifier gate.

use layermoe::allocator::AllocationPlan;
use layermoe::corpus::{generate, layout_languages};
use layermoe::model::{forward, ModelConfig, MoeModel, ParamKey, RoutingMode};
use layermoe::numerics::SeededRng;

fn main() -> layermoe::Result<()> {
    let mut model = MoeModel::dense(ModelConfig::toy())?.upcycle(&AllocationPlan::uniform(4, 2), "g1")?;
    model.reset_classifiers(&[2, 3])?;
    // random routers and classifiers stand in for trained ones
    let mut rng = SeededRng::new(5);
    for l in 0..4 {
        for key in [ParamKey::Router(l), ParamKey::Classifier(l)] {
            if let Some(m) = model.param_mut(key) {
                m.data_mut().iter_mut().for_each(|v| *v = rng.normal());
            }
        }
    }

    let specs = layout_languages(&[("a", "g0")], 24, 0, 0.0, 1);
    let tokens = generate(&specs, 32, 32, 2)?.sequences[0].tokens[..8].to_vec();
    let plain = forward(&model, &tokens, RoutingMode::Plain)?;
    let gated = forward(&model, &tokens, RoutingMode::Gated)?;
    for layer in 0..model.layer_count() {
        println!("layer {layer}:");
        for t in 0..tokens.len() {
            let (p, g) = (&plain.routes[layer][t], &gated.routes[layer][t]);
            println!(
                "  token {:3}  plain {:?} {:.2?}  gated {:?} {:.2?}  old? {:?}",
                tokens[t], p.experts, p.weights, g.experts, g.weights, g.classified_old
            );
        }
    }
    Ok(())
}
