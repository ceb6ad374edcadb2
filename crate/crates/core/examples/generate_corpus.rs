//! Synthetic Markov languages with tagged sequences, written as JSONL.

use layermoe::corpus::{generate, layout_languages, MarkovLanguage};

fn main() -> layermoe::Result<()> {
    // three languages in two groups; each draws half its alphabet from a shared block
    let specs = layout_languages(&[("en", "g0"), ("de", "g1"), ("nl", "g1")], 24, 16, 0.5, 1);
    for spec in &specs {
        let lang = MarkovLanguage::new(spec)?;
        let first = lang.transition_row(None);
        let top = first.iter().copied().fold(0.0, f64::max);
        println!(
            "{} ({}): {} symbols, most likely first symbol p = {top:.3}",
            spec.id,
            spec.group,
            lang.alphabet().len()
        );
    }

    let corpus = generate(&specs, 10_000, 32, 2)?;
    for lang in corpus.languages() {
        let part = corpus.language(&lang);
        println!("{lang}: {} sequences, {} tokens", part.len(), part.token_count());
    }
    let sample = &corpus.sequences[0];
    println!("first sequence ({}): {:?}", sample.lang, &sample.tokens[..12]);

    let path = std::env::temp_dir().join("layermoe_corpus.jsonl");
    corpus.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
