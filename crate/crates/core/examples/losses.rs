//! The training objectives on hand-built inputs, and a gradient check of the
//! stage-2 objective against central differences.

use layermoe::allocator::AllocationPlan;
use layermoe::corpus::{generate, layout_languages};
use layermoe::model::{partition_params, ModelConfig, MoeModel, ParamKey};
use layermoe::numerics::{Matrix, SeededRng};
use layermoe::trainer::{balance_loss, batch_loss, cls_loss, loss_and_grad, lpr_loss, ntp_loss, ClsMode, TrainingRecipe};

fn main() -> layermoe::Result<()> {
    let uniform = Matrix::filled(4, 2, 0.5);
    println!("ntp, uniform over 2 classes: {:.6}", ntp_loss(&uniform, &[0, 1, 1, 0])?);
    let scores = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]])?;
    println!("balance, both tokens on expert 0: {:.6}", balance_loss(&scores, &[vec![0], vec![0]], 1)?);
    println!("lpr, G0 = 0.5: {:.6}", lpr_loss(&[Matrix::filled(1, 2, 0.5)], &[true])?);
    println!("cls, zero logits: {:.6}", cls_loss(&[Matrix::zeros(2, 2)], &[true, false], ClsMode::StandardCe)?);

    let mut cfg = ModelConfig::toy();
    (cfg.layers, cfg.hidden, cfg.heads, cfg.ffn, cfg.vocab, cfg.context) = (2, 16, 2, 16, 32, 8);
    let mut model = MoeModel::dense(cfg)?.upcycle(&AllocationPlan::uniform(2, 2), "g1")?;
    model.reset_classifiers(&[1])?;
    // zero routers tie every score, where top-K selection is not
    // differentiable; move away from the tie first
    let mut rng = SeededRng::new(3);
    for key in [ParamKey::Router(0), ParamKey::Router(1), ParamKey::Classifier(1)] {
        model.param_mut(key).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    }
    let specs = layout_languages(&[("a", "g0"), ("b", "g1")], 12, 0, 0.0, 1);
    let corpus = generate(&specs, 16, 8, 2)?;
    let batch: Vec<Vec<usize>> = corpus.sequences.iter().map(|s| s.tokens.clone()).collect();
    let mask = corpus.old_mask(&["g0".to_string()].into());

    let recipe = TrainingRecipe::stage2();
    let partition = partition_params(&model, recipe.stage)?;
    let (report, grads) = loss_and_grad(&model, &batch, &mask, &recipe, &partition)?;
    println!("stage 2: {report:?}");
    let key = ParamKey::Router(0);
    let eps = 1e-5;
    for (r, c) in [(0, 0), (3, 1), (7, 2)] {
        let base = model.param(key).unwrap().get(r, c);
        model.param_mut(key).unwrap().set(r, c, base + eps);
        let up = batch_loss(&model, &batch, &mask, &recipe)?.total;
        model.param_mut(key).unwrap().set(r, c, base - eps);
        let down = batch_loss(&model, &batch, &mask, &recipe)?.total;
        model.param_mut(key).unwrap().set(r, c, base);
        println!(
            "router[0]({r},{c}): analytic {:+.8e}  numeric {:+.8e}",
            grads[&key].get(r, c),
            (up - down) / (2.0 * eps)
        );
    }
    Ok(())
}
