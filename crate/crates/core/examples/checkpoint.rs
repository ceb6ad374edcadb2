//! Saving and loading an expanded model, and what a damaged file produces.

use layermoe::allocator::AllocationPlan;
use layermoe::model::{ModelConfig, MoeModel};

fn main() -> layermoe::Result<()> {
    let mut model = MoeModel::dense(ModelConfig::toy())?.upcycle(&AllocationPlan::uniform(4, 2), "g1")?;
    model.reset_classifiers(&[1, 2])?;
    let path = std::env::temp_dir().join("layermoe_example.lmoe");
    model.save(&path)?;
    let loaded = MoeModel::load(&path)?;
    assert_eq!(loaded, model);
    println!(
        "{}: {} bytes, experts {:?}, classifiers {:?}, history {:?}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        loaded.expert_counts(),
        loaded.classifier_layers(),
        loaded.history
    );

    let mut bytes = std::fs::read(&path)?;
    bytes[4] = 9;
    match MoeModel::from_bytes(&bytes) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("damaged header: {e}"),
    }
    Ok(())
}
