//! Inverse-similarity allocation of a 72-expert budget over 24 layers.

use layermoe::allocator::{allocate, validate, AllocationPlan};

fn main() -> layermoe::Result<()> {
    // a profile shaped like a real model: dissimilar early and late layers,
    // a highly shared middle
    let similarity: Vec<f64> = (0..24)
        .map(|i| {
            let x = i as f64 / 23.0;
            0.35 + 0.5 * (std::f64::consts::PI * x).sin()
        })
        .collect();
    let plan = allocate(&similarity, 72)?;
    println!("layer  similarity     raw  ceiled  final");
    for l in &plan.layers {
        println!(
            "{:5}  {:10.3}  {:6.3}  {:6}  {:5}",
            l.index, l.similarity, l.raw, l.ceiled, l.new_experts
        );
    }
    println!("total {} of budget {}", plan.total(), plan.budget);
    assert!(validate(&plan, 24).is_empty());

    // scaling every similarity leaves the plan unchanged
    let doubled: Vec<f64> = similarity.iter().map(|s| 2.0 * s).collect();
    assert_eq!(allocate(&doubled, 72)?.new_experts(), plan.new_experts());

    let uniform = AllocationPlan::uniform(24, 3);
    println!("uniform baseline: {:?}", uniform.new_experts());
    println!("{}", plan.to_json()?);
    Ok(())
}
