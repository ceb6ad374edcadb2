//! Per-layer similarity between old and new languages, and the same profile
//! recomputed from hidden states stored in dump files.

use layermoe::corpus::{generate, layout_languages};
use layermoe::model::{ModelConfig, MoeModel};
use layermoe::profiler::{
    collect_candidates, indicated_similarity, profile, read_hsa_dump, select_classifier_layers, write_hsa_dump,
    NewNewDenominator, PairMatrix,
};
use layermoe::trainer::{train_base, TrainingRecipe};

fn main() -> layermoe::Result<()> {
    let specs = layout_languages(&[("a", "g0"), ("b", "g1"), ("c", "g1")], 24, 24, 0.5, 1);
    let corpus = generate(&specs, 8_000, 32, 2)?;
    let recipe = TrainingRecipe {
        learning_rate: 3e-3,
        steps: 150,
        ..TrainingRecipe::base()
    };
    let (model, _) = train_base(MoeModel::dense(ModelConfig::toy())?, &corpus.in_groups(&["g0"]), &recipe)?;

    let old = vec!["a".to_string()];
    let new = vec!["b".to_string(), "c".to_string()];
    let p = profile(&model, &corpus, &old, &new, 256, 11, NewNewDenominator::Corrected)?;
    print!("{}", p.to_csv());
    println!("classifier layers (top 2): {:?}", select_classifier_layers(&p.new_old(), 2)?);

    // hidden states produced elsewhere enter through the dump format
    let dir = std::env::temp_dir();
    for (i, lang) in old.iter().chain(&new).enumerate() {
        let sets = collect_candidates(&model, &corpus, lang, 256, layermoe::numerics::SeededRng::substream(11, i as u64).next_u64())?;
        write_hsa_dump(&sets, std::fs::File::create(dir.join(format!("{lang}.hsa")))?)?;
    }
    let loaded: Vec<_> = old
        .iter()
        .chain(&new)
        .map(|lang| read_hsa_dump(std::fs::File::open(dir.join(format!("{lang}.hsa")))?))
        .collect::<layermoe::Result<_>>()?;
    for layer in 0..model.layer_count() {
        let sets: Vec<_> = loaded.iter().map(|s| &s[layer]).collect();
        let s = indicated_similarity(&PairMatrix::from_sets(&sets)?, layer, &old, &new, NewNewDenominator::Corrected)?;
        println!("layer {layer}: from dumps S = {:.6} (in memory {:.6})", s.s, p.layers[layer].s);
    }
    Ok(())
}
