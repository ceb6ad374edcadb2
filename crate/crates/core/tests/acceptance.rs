//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use layermoe::allocator::{allocate, validate, AllocationPlan, AllocationStrategy};
use layermoe::cli::{dispatch, sha256_file, CorpusConfig, Manifest};
use layermoe::corpus::{generate, layout_languages, TaggedCorpus};
use layermoe::model::{partition_params, CHECKPOINT_MAGIC, ModelConfig, MoeModel, ParamKey, RoutingMode};
use layermoe::numerics::{cosine, Matrix, SeededRng};
use layermoe::profiler::{
    pair_similarity, read_hsa_dump, select_classifier_layers, write_hsa_dump, CandidateSet,
    DEFAULT_CLASSIFIER_LAYERS_LIFELONG, DEFAULT_CLASSIFIER_LAYERS_SINGLE,
};
use layermoe::trainer::{
    balance_loss, batch_loss, cls_loss, evaluate, lifelong_expand, loss_and_grad, lpr_loss, stage2_train,
    train_base, AllocationChoice, ClsMode, ExpansionConfig, ExpansionOutcome, Metrics, TrainingRecipe,
};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Check {
    let mut rng = SeededRng::new(101);
    let (m, budget) = (24, 72);
    for trial in 0..1000 {
        // spread over several orders of magnitude, with occasional ties
        let mut s: Vec<f64> = (0..m).map(|_| (rng.uniform() * 6.0 - 3.0).exp()).collect();
        if trial % 10 == 0 {
            s[3] = s[7];
        }
        let plan = ok(allocate(&s, budget))?;
        let counts = plan.new_experts();
        ensure!(counts.iter().sum::<usize>() == budget, "trial {trial}: sum {}", counts.iter().sum::<usize>());
        ensure!(counts.iter().all(|&n| n >= 1), "trial {trial}: empty layer");
        ensure!(validate(&plan, m).is_empty(), "trial {trial}: {:?}", validate(&plan, m));

        // independent pre-reconciliation oracle
        let inv_total: f64 = s.iter().map(|v| 1.0 / v).sum();
        for (i, l) in plan.layers.iter().enumerate() {
            let raw = (1.0 / s[i]) / inv_total * budget as f64;
            ensure!((l.raw - raw).abs() <= 1e-9 * raw.max(1.0), "trial {trial}: raw {i}");
        }
        let pre = plan.ceiled();
        for i in 0..m {
            for j in 0..m {
                ensure!(
                    !(s[i] < s[j] && pre[i] < pre[j]),
                    "trial {trial}: layer {i} less similar than {j} but fewer experts"
                );
            }
        }
        let c = (rng.uniform() * 8.0 - 4.0).exp();
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        let again = ok(allocate(&scaled, budget))?;
        ensure!(again.new_experts() == counts, "trial {trial}: not scale invariant (c = {c})");
    }
    Ok("1000 plans, m=24, budget 72".into())
}

// ---------------------------------------------------------------- 2

fn random_set(rng: &mut SeededRng, q: usize, h: usize, layer: usize, lang: &str) -> CandidateSet {
    let offset: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
    let rows: Vec<Vec<f64>> = (0..q)
        .map(|_| offset.iter().map(|o| o * rng.uniform() + rng.normal()).collect())
        .collect();
    CandidateSet::new(lang, layer, Matrix::from_rows(&rows).unwrap()).unwrap()
}

fn brute_force(a: &CandidateSet, b: &CandidateSet) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.q() {
        for j in 0..b.q() {
            sum += cosine(a.vectors.row(i), b.vectors.row(j)).unwrap();
        }
    }
    sum / (a.q() * b.q()) as f64
}

fn criterion_2() -> Check {
    let mut rng = SeededRng::new(202);
    let mut worst: f64 = 0.0;
    for pair in 0..200 {
        let h = 2 + rng.below(31);
        let (qa, qb) = (1 + rng.below(64), 1 + rng.below(64));
        let a = random_set(&mut rng, qa, h, 0, "a");
        let b = random_set(&mut rng, qb, h, 0, "b");
        let fast = ok(pair_similarity(&a, &b))?;
        let back = ok(pair_similarity(&b, &a))?;
        let slow = brute_force(&a, &b);
        worst = worst.max((fast - slow).abs());
        ensure!((fast - slow).abs() <= 1e-10, "pair {pair}: {fast} vs {slow}");
        ensure!((fast - back).abs() <= 1e-15, "pair {pair}: asymmetric");
        ensure!((-1.0..=1.0).contains(&fast), "pair {pair}: {fast} out of range");
    }
    Ok(format!("200 pairs, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.layers = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn = 16;
    cfg.vocab = 32;
    cfg.context = 8;
    cfg
}

fn small_corpus() -> TaggedCorpus {
    let specs = layout_languages(&[("aa", "g0"), ("bb", "g1")], 10, 8, 0.5, 3);
    generate(&specs, 64, 8, 5).unwrap()
}

fn criterion_3() -> Check {
    // uniform routing: every token selects each of N experts K/N of the time
    // and every router row is uniform
    let (n, k, t) = (4, 2, 8);
    let scores = Matrix::filled(t, n, 1.0 / n as f64);
    let selected: Vec<Vec<usize>> = (0..t).map(|r| vec![r % n, (r + 1) % n]).collect();
    let b = ok(balance_loss(&scores, &selected, k))?;
    ensure!((b - 1.0).abs() <= 1e-9, "uniform balance {b}");

    let scores = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]).unwrap();
    let b = ok(balance_loss(&scores, &[vec![0], vec![0]], 1))?;
    ensure!((b - 1.7).abs() <= 1e-12, "hand example {b}");

    let ln2 = std::f64::consts::LN_2;
    let l = ok(lpr_loss(&[Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap()], &[true]))?;
    ensure!((l - ln2).abs() <= 1e-12, "lpr {l}");
    let logits = Matrix::zeros(3, 2);
    for mode in [ClsMode::StandardCe, ClsMode::LiteralPaper] {
        let c = ok(cls_loss(&[logits.clone()], &[true, false, true], mode))?;
        ensure!((c - ln2).abs() <= 1e-12, "cls {mode:?} {c}");
    }

    // composition per training step on a small model
    let corpus = small_corpus();
    let old = corpus.in_groups(&["g0"]);
    let new = corpus.in_groups(&["g1"]);
    let dense = ok(MoeModel::dense(small_config()))?;
    let mut cfg = ExpansionConfig::toy("g1", 4);
    cfg.q = 16;
    cfg.classifier_layers = 1;
    cfg.stage1.steps = 5;
    cfg.stage1.batch_size = 4;
    cfg.stage1.alpha = 0.3;
    cfg.stage2.steps = 5;
    cfg.stage2.batch_size = 4;
    cfg.stage2.beta = 0.4;
    cfg.stage2.gamma = 0.6;
    let out = ok(lifelong_expand(&dense, &old, &new, &cfg))?;
    for r in &out.stage1_reports {
        let want = r.ntp + 0.3 * r.balance;
        ensure!((r.total - want).abs() <= 1e-12, "stage-1 step {}: {} vs {want}", r.step, r.total);
    }
    for r in &out.stage2_reports {
        let want = r.ntp + 0.4 * r.lpr + 0.6 * r.cls;
        ensure!((r.total - want).abs() <= 1e-12, "stage-2 step {}: {} vs {want}", r.step, r.total);
    }
    Ok("anchors and composition hold".into())
}

// ---------------------------------------------------------------- 4

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
const FD_FLOOR: f64 = 1e-4;

fn randomize(model: &mut MoeModel, keys: &[ParamKey], seed: u64) {
    let mut rng = SeededRng::new(seed);
    for &k in keys {
        if let Some(m) = model.param_mut(k) {
            m.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
        }
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over every trainable scalar, and the number of scalars checked.
fn fd_check(model: &MoeModel, batch: &[Vec<usize>], mask: &[Vec<bool>], recipe: &TrainingRecipe) -> Result<(f64, usize), String> {
    let partition = ok(partition_params(model, recipe.stage))?;
    let (_, grads) = ok(loss_and_grad(model, batch, mask, recipe, &partition))?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = model.clone();
    for slice in &partition.trainable {
        let (rows, cols) = model.param(slice.key).unwrap().shape();
        for r in 0..rows {
            for c in 0..cols {
                let inside = slice.columns.as_ref().is_none_or(|cr| cr.contains(&c));
                let analytic = grads[&slice.key].get(r, c);
                if !inside {
                    ensure!(analytic == 0.0, "{:?} ({r},{c}) frozen but has gradient", slice.key);
                    continue;
                }
                let base = model.param(slice.key).unwrap().get(r, c);
                probe.param_mut(slice.key).unwrap().set(r, c, base + FD_EPS);
                let up = ok(batch_loss(&probe, batch, mask, recipe))?.total;
                probe.param_mut(slice.key).unwrap().set(r, c, base - FD_EPS);
                let down = ok(batch_loss(&probe, batch, mask, recipe))?.total;
                probe.param_mut(slice.key).unwrap().set(r, c, base);
                let numeric = (up - down) / (2.0 * FD_EPS);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
                ensure!(
                    err <= FD_TOL,
                    "{:?} ({r},{c}) in {:?}: analytic {analytic} numeric {numeric}",
                    slice.key,
                    recipe.stage
                );
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

fn criterion_4() -> Check {
    let corpus = small_corpus();
    let old: BTreeSet<String> = ["g0".to_string()].into();
    let picks = [0, 1, corpus.len() - 2, corpus.len() - 1];
    let batch: Vec<Vec<usize>> = picks.iter().map(|&i| corpus.sequences[i].tokens.clone()).collect();
    let mask_all = corpus.old_mask(&old);
    let mask: Vec<Vec<bool>> = picks.iter().map(|&i| mask_all[i].clone()).collect();
    let new_only: Vec<Vec<usize>> = batch[2..].to_vec();
    let new_mask = vec![vec![false; 8]; 2];

    let dense = ok(MoeModel::dense(small_config()))?;
    let first = ok(dense.upcycle(&AllocationPlan::from_counts(&[1, 2], AllocationStrategy::External), "g1"))?;
    let second = ok(first.upcycle(&AllocationPlan::from_counts(&[2, 1], AllocationStrategy::External), "g2"))?;
    let routers = [ParamKey::Router(0), ParamKey::Router(1)];

    let mut worst: f64 = 0.0;
    let mut total = 0;
    let mut run = |model: &MoeModel, batch: &[Vec<usize>], mask: &[Vec<bool>], recipe: TrainingRecipe| -> Result<(), String> {
        let (w, n) = fd_check(model, batch, mask, &recipe)?;
        worst = worst.max(w);
        total += n;
        Ok(())
    };

    run(&dense, &batch, &mask, TrainingRecipe::base())?;
    for model in [&first, &second] {
        let mut m = model.clone();
        randomize(&mut m, &routers, 41);
        for alpha in [0.01, 1.0] {
            run(&m, &new_only, &new_mask, TrainingRecipe { alpha, ..TrainingRecipe::stage1() })?;
        }
        let mut m2 = m.clone();
        ok(m2.reset_classifiers(&[0, 1]))?;
        randomize(&mut m2, &[ParamKey::Classifier(0), ParamKey::Classifier(1)], 43);
        for (beta, gamma, cls_mode) in [
            (0.1, 0.1, ClsMode::StandardCe),
            (1.0, 0.0, ClsMode::StandardCe),
            (0.0, 1.0, ClsMode::StandardCe),
            (0.5, 0.7, ClsMode::LiteralPaper),
        ] {
            let recipe = TrainingRecipe {
                beta,
                gamma,
                cls_mode,
                ..TrainingRecipe::stage2()
            };
            run(&m2, &batch, &mask, recipe)?;
        }
    }
    Ok(format!("{total} scalars, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- toy runs

struct Toy {
    held_out: TaggedCorpus,
    dense: MoeModel,
    layer_wise: ExpansionOutcome,
    uniform: ExpansionOutcome,
    no_classifier: MoeModel,
}

fn toy_runs() -> Result<Toy, String> {
    let corpus = CorpusConfig::default();
    let train = ok(corpus.build())?;
    let held_out = ok(corpus.build_with(4_096, 3))?;
    let old = train.in_groups(&["g0"]);
    let new = train.in_groups(&["g1"]);

    let base = TrainingRecipe {
        learning_rate: 3e-3,
        steps: 600,
        ..TrainingRecipe::base()
    };
    let (dense, _) = ok(train_base(ok(MoeModel::dense(ModelConfig::toy()))?, &old, &base))?;
    let layer_wise = ok(lifelong_expand(&dense, &old, &new, &ExpansionConfig::toy("g1", 8)))?;
    let uniform_cfg = ExpansionConfig {
        allocation: AllocationChoice::Uniform,
        ..ExpansionConfig::toy("g1", 8)
    };
    let uniform = ok(lifelong_expand(&dense, &old, &new, &uniform_cfg))?;
    let olds: BTreeSet<String> = ["g0".to_string()].into();
    let recipe = TrainingRecipe {
        gamma: 0.0,
        ..ExpansionConfig::toy("g1", 8).stage2
    };
    let (no_classifier, _) = ok(stage2_train(layer_wise.stage1_model.clone(), &layer_wise.review, &recipe, &[], &olds))?;
    Ok(Toy {
        held_out,
        dense,
        layer_wise,
        uniform,
        no_classifier,
    })
}

fn eval(model: &MoeModel, corpus: &TaggedCorpus, mode: RoutingMode) -> Result<Metrics, String> {
    ok(evaluate(model, corpus, mode, &["g0".to_string()].into()))
}

// ---------------------------------------------------------------- 5

fn digest(model: &MoeModel, keep: impl Fn(ParamKey) -> bool) -> String {
    let mut h = Sha256::new();
    for (key, m) in model.params() {
        if keep(key) {
            h.update(key.name().as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn criterion_5(toy: &Toy) -> Check {
    let out = &toy.layer_wise;
    ensure!(out.stage1_reports.len() == 500 && out.stage2_reports.len() == 500, "expected 500-step stages");
    let backbone: BTreeSet<ParamKey> = toy.dense.params().into_iter().map(|(k, _)| k).collect();
    let in_backbone = |k: ParamKey| backbone.contains(&k);
    ensure!(
        digest(&toy.dense, in_backbone) == digest(&out.stage1_model, in_backbone),
        "backbone changed during stage 1"
    );
    let not_routing = |k: ParamKey| !matches!(k, ParamKey::Router(_) | ParamKey::Classifier(_));
    ensure!(
        digest(&out.stage1_model, not_routing) == digest(&out.model, not_routing),
        "backbone or experts changed during stage 2"
    );
    // the trainable groups did move
    let new_experts = |k: ParamKey| !backbone.contains(&k) && not_routing(k);
    let upcycled = ok(toy.dense.upcycle(&out.plan, "g1"))?;
    ensure!(
        digest(&upcycled, new_experts) != digest(&out.stage1_model, new_experts),
        "new experts did not train in stage 1"
    );
    let routing = |k: ParamKey| matches!(k, ParamKey::Router(_));
    ensure!(
        digest(&out.stage1_model, routing) != digest(&out.model, routing),
        "routers did not train in stage 2"
    );
    Ok(format!(
        "backbone {} / experts {}",
        &digest(&out.model, in_backbone)[..12],
        &digest(&out.model, not_routing)[..12]
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6(toy: &Toy) -> Check {
    let out = &toy.layer_wise;
    let held = &toy.held_out;
    let dense = eval(&toy.dense, held, RoutingMode::Plain)?;
    let stage1 = eval(&out.stage1_model, held, RoutingMode::Plain)?;
    let gated = eval(&out.model, held, RoutingMode::Gated)?;
    let (a0, b0) = (&dense.languages["a"], &dense.languages["b"]);
    let b1 = &stage1.languages["b"];
    let (a2, b2) = (&gated.languages["a"], &gated.languages["b"]);

    let drop = 1.0 - b1.perplexity / b0.perplexity;
    let a_drift = (a2.perplexity / a0.perplexity - 1.0).abs();
    let retention = (b0.mean_nll - b2.mean_nll) / (b0.mean_nll - b1.mean_nll);
    let layers = &out.plan.classifier_layers;
    let routed: Vec<f64> = layers.iter().map(|&l| gated.layers[l].old_to_e0.unwrap_or(0.0)).collect();
    let summary = format!(
        "plan {:?}, classifiers {layers:?}; B ppl {:.1} -> {:.2} (drop {:.1}%); A ppl {:.3} vs {:.3} ({:.2}%); A->E0 {routed:.3?}; B gain retained {:.1}%",
        out.plan.new_experts(),
        b0.perplexity,
        b1.perplexity,
        100.0 * drop,
        a2.perplexity,
        a0.perplexity,
        100.0 * a_drift,
        100.0 * retention
    );
    ensure!(drop >= 0.30, "B perplexity drop below 30%: {summary}");
    ensure!(a_drift <= 0.02, "A perplexity off by more than 2%: {summary}");
    ensure!(!layers.is_empty() && routed.iter().all(|&r| r >= 0.95), "A routing to E0 below 95%: {summary}");
    ensure!(retention >= 0.90, "B retains under 90% of its gain: {summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 7

fn criterion_7(toy: &Toy) -> Check {
    let held = &toy.held_out;
    let lw = eval(&toy.layer_wise.model, held, RoutingMode::Gated)?;
    let un = eval(&toy.uniform.model, held, RoutingMode::Gated)?;
    let nc = eval(&toy.no_classifier, held, RoutingMode::Gated)?;
    let (lw_b, un_b) = (lw.languages["b"].perplexity, un.languages["b"].perplexity);
    let (lw_a, nc_a) = (lw.languages["a"].perplexity, nc.languages["a"].perplexity);
    let lw1 = eval(&toy.layer_wise.stage1_model, held, RoutingMode::Plain)?.languages["b"].perplexity;
    let un1 = eval(&toy.uniform.stage1_model, held, RoutingMode::Plain)?.languages["b"].perplexity;
    let summary = format!(
        "B ppl layer-wise {lw_b:.2} vs uniform {un_b:.2} ({:?}), after stage 1 {lw1:.2} vs {un1:.2}; A ppl with classifiers {lw_a:.3} vs without {nc_a:.3}",
        toy.uniform.plan.new_experts()
    );
    ensure!(lw_b <= un_b, "layer-wise worse than uniform: {summary}");
    ensure!(nc_a > lw_a, "removing classifiers did not hurt A: {summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let cases: [(&[f64], usize, &[usize]); 6] = [
        (&[0.1, 0.5, 0.3, 0.5, 0.2], 2, &[1, 3]),
        (&[0.4, 0.4, 0.4, 0.4], 2, &[0, 1]),
        (&[0.2, 0.9, 0.9, 0.1, 0.9], 2, &[1, 2]),
        (&[0.3, 0.1, 0.3, 0.2], 3, &[0, 2, 3]),
        (&[0.7, 0.6, 0.5], 3, &[0, 1, 2]),
        (&[-0.2, -0.1, -0.3], 1, &[1]),
    ];
    for (s, k, want) in cases {
        let got = ok(select_classifier_layers(s, k))?;
        ensure!(got == want, "{s:?} k={k}: got {got:?}, want {want:?}");
    }
    ensure!(select_classifier_layers(&[0.1, 0.2], 0).is_err(), "k=0 accepted");
    ensure!(select_classifier_layers(&[0.1, 0.2], 3).is_err(), "k>m accepted");
    let mut s: Vec<f64> = (0..24).map(|i| ((i * 7) % 24) as f64 / 24.0).collect();
    s[5] = s[11];
    let seven = ok(select_classifier_layers(&s, DEFAULT_CLASSIFIER_LAYERS_SINGLE))?;
    let mut order: Vec<usize> = (0..24).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let mut want: Vec<usize> = order[..7].to_vec();
    want.sort();
    ensure!(seven == want, "24-layer top-7 {seven:?} vs {want:?}");
    ensure!(DEFAULT_CLASSIFIER_LAYERS_SINGLE == 7 && DEFAULT_CLASSIFIER_LAYERS_LIFELONG == 5, "defaults");
    ensure!(ExpansionConfig::new("g1", 72).classifier_layers == 7, "single default not wired");
    ensure!(ExpansionConfig::lifelong("g2", 72).classifier_layers == 5, "lifelong default not wired");
    Ok("exact sets incl. ties; defaults 7 / 5".into())
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) -> Result<(), String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["layermoe"];
    argv.extend_from_slice(args);
    let code = dispatch(argv, &[], &mut out, &mut err);
    ensure!(code == 0, "{args:?} exited {code}: {}", String::from_utf8_lossy(&err));
    Ok(())
}

fn criterion_9() -> Check {
    // HSA dump
    let mut rng = SeededRng::new(909);
    let sets: Vec<CandidateSet> = (0..3).map(|l| random_set(&mut rng, 20, 12, l, "xx")).collect();
    let mut first = Vec::new();
    ok(write_hsa_dump(&sets, &mut first))?;
    let read = ok(read_hsa_dump(first.as_slice()))?;
    let mut second = Vec::new();
    ok(write_hsa_dump(&read, &mut second))?;
    ensure!(first == second, "HSA dump not bit-exact on rewrite");
    ensure!(ok(read_hsa_dump(second.as_slice()))? == read, "HSA values changed");
    for (s, r) in sets.iter().zip(&read) {
        let same = s.vectors.data().iter().zip(r.vectors.data()).all(|(a, b)| (*a as f32) as f64 == *b);
        ensure!(same, "HSA payload is not the f32 rounding of the input");
    }
    let mut bad = first.clone();
    bad[0] = b'X';
    ensure!(read_hsa_dump(bad.as_slice()).is_err(), "bad HSA magic accepted");
    let mut bad = first.clone();
    bad[4] = 99;
    ensure!(read_hsa_dump(bad.as_slice()).is_err(), "bad HSA version accepted");
    ensure!(read_hsa_dump(&first[..first.len() - 3]).is_err(), "truncated HSA accepted");

    // checkpoints
    let mut model = ok(ok(MoeModel::dense(small_config()))?.upcycle(&AllocationPlan::uniform(2, 2), "g1"))?;
    ok(model.reset_classifiers(&[1]))?;
    randomize(&mut model, &[ParamKey::Classifier(1)], 9);
    let bytes = ok(model.to_bytes())?;
    let back = ok(MoeModel::from_bytes(&bytes))?;
    ensure!(back == model && ok(back.to_bytes())? == bytes, "checkpoint roundtrip not bit-exact");
    ensure!(&bytes[..4] == CHECKPOINT_MAGIC, "magic");
    for corrupt in [
        {
            let mut b = bytes.clone();
            b[1] ^= 0xff;
            b
        },
        {
            let mut b = bytes.clone();
            b[4] = 77;
            b
        },
        {
            let mut b = bytes.clone();
            b[12] ^= 0x55;
            b
        },
        bytes[..bytes.len() - 8].to_vec(),
        bytes[..10].to_vec(),
    ] {
        let caught = catch_unwind(|| MoeModel::from_bytes(&corrupt).is_err());
        ensure!(matches!(caught, Ok(true)), "corrupted checkpoint not rejected cleanly");
    }

    // manifest replay
    let dir = ok(tempfile::tempdir())?;
    let p = |name: &str| dir.path().join(name).display().to_string();
    cli(&[
        "gen-corpus", "--tokens", "2048", "--context", "16", "--set", "corpus.shared_len=16", "--set",
        "corpus.overlap=0.5", "--out", &p("corpus.jsonl"),
    ])?;
    cli(&[
        "train-base", "--corpus", &p("corpus.jsonl"), "--steps", "20", "--set", "model.layers=2",
        "--set", "model.hidden=16", "--set", "model.ffn=16", "--set", "model.context=16", "--out", &p("base.lmoe"),
    ])?;
    cli(&["profile", "--model", &p("base.lmoe"), "--corpus", &p("corpus.jsonl"), "--q", "64", "--out", &p("profile.json")])?;
    cli(&["allocate", "--profile", &p("profile.json"), "--budget", "4", "--out", &p("plan.json")])?;
    cli(&[
        "expand", "--model", &p("base.lmoe"), "--plan", &p("plan.json"), "--corpus", &p("corpus.jsonl"),
        "--steps", "10", "--out", &p("stage1.lmoe"),
    ])?;
    cli(&[
        "review", "--model", &p("stage1.lmoe"), "--corpus", &p("corpus.jsonl"), "--classifiers", "1",
        "--steps", "10", "--set", "q=64", "--out", &p("model.lmoe"),
    ])?;
    cli(&["eval", "--model", &p("model.lmoe"), "--corpus", &p("corpus.jsonl"), "--out", &p("metrics.json")])?;

    let steps = ["corpus", "base", "profile", "plan", "stage1", "model", "metrics"];
    let manifests: Vec<Manifest> = steps
        .iter()
        .map(|s| ok(Manifest::load(dir.path().join(format!("{s}.manifest.json")))))
        .collect::<Result<_, _>>()?;
    let mut recorded = BTreeMap::new();
    for m in &manifests {
        for (path, hash) in &m.outputs {
            ensure!(ok(sha256_file(path))? == *hash, "{path} does not match its manifest");
            recorded.insert(path.clone(), hash.clone());
        }
    }
    for path in recorded.keys() {
        ok(std::fs::remove_file(path))?;
    }
    for s in steps {
        let manifest = p(&format!("{s}.manifest.json"));
        let replay = p(&format!("{s}.replay.json"));
        ok(std::fs::copy(&manifest, &replay))?;
        cli(&[manifests[steps.iter().position(|x| *x == s).unwrap()].command.as_str(), "--config", &replay])?;
    }
    for (path, hash) in &recorded {
        ensure!(Path::new(path).exists(), "{path} not regenerated");
        ensure!(ok(sha256_file(path))? == *hash, "{path} differs after replay");
    }
    Ok(format!("{} files reproduced from manifests", recorded.len()))
}

// ---------------------------------------------------------------- harness

fn report(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {id} PASS {name} [{secs:.1}s] {detail}"),
        Err(detail) => println!("criterion {id} FAIL {name} [{secs:.1}s] {detail}"),
    }
    result.is_ok()
}

fn main() {
    let mut passed = Vec::new();
    passed.push(report(1, "allocation fidelity", criterion_1));
    passed.push(report(2, "similarity oracle", criterion_2));
    passed.push(report(3, "loss anchors", criterion_3));
    passed.push(report(4, "gradient correctness", criterion_4));

    let start = Instant::now();
    let toy = toy_runs();
    println!("toy runs finished in {:.1}s", start.elapsed().as_secs_f64());
    let with_toy = |f: fn(&Toy) -> Check| {
        let toy = &toy;
        move || match toy {
            Ok(t) => f(t),
            Err(e) => Err(format!("toy run failed: {e}")),
        }
    };
    passed.push(report(5, "freeze discipline", with_toy(criterion_5)));
    passed.push(report(6, "end-to-end mechanism", with_toy(criterion_6)));
    passed.push(report(7, "ablation direction", with_toy(criterion_7)));
    passed.push(report(8, "classifier-layer selection", criterion_8));
    passed.push(report(9, "formats and replay", criterion_9));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
