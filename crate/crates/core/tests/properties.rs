//! Invariants checked over generated inputs.

use std::collections::BTreeSet;

use layermoe::allocator::{allocate, AllocationPlan, AllocationStrategy};
use layermoe::corpus::{generate, layout_languages, BOS};
use layermoe::model::{route, top_k, ModelConfig, MoeModel, ParamKey};
use layermoe::numerics::{Matrix, SeededRng};
use layermoe::profiler::{pair_similarity, CandidateSet};
use layermoe::trainer::{balance_loss, lpr_loss};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    SeededRng::new(seed).gaussian_matrix(rows, cols, 1.0)
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_weights_are_a_distribution(h in 1usize..12, n in 1usize..9, k in 1usize..5, seed in 0u64..1000) {
        let x: Vec<f64> = matrix(1, h, seed).into_data();
        let r = route(&x, &matrix(h, n, seed + 1), k).unwrap();
        prop_assert_eq!(r.experts.len(), k.min(n));
        let distinct: BTreeSet<usize> = r.experts.iter().copied().collect();
        prop_assert_eq!(distinct.len(), r.experts.len());
        prop_assert!(r.weights.iter().all(|&w| w > 0.0));
        prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((r.scores.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn top_k_ignores_positive_input_scale(h in 1usize..12, n in 2usize..9, k in 1usize..4, c in 0.01f64..100.0, seed in 0u64..1000) {
        let x: Vec<f64> = matrix(1, h, seed).into_data();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let router = matrix(h, n, seed + 7);
        prop_assert_eq!(route(&x, &router, k).unwrap().experts, route(&scaled, &router, k).unwrap().experts);
    }

    #[test]
    fn top_k_prefers_lower_index_on_ties(n in 1usize..10, k in 1usize..10) {
        prop_assert_eq!(top_k(&vec![0.5; n], k), (0..k.min(n)).collect::<Vec<_>>());
    }

    #[test]
    fn balance_is_nonnegative_and_permutation_invariant(t in 1usize..10, n in 2usize..6, k in 1usize..3, seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..t).map(|_| distribution(&(0..n).map(|_| rng.uniform() + 1e-3).collect::<Vec<_>>())).collect();
        let selected: Vec<Vec<usize>> = rows.iter().map(|r| top_k(r, k)).collect();
        let b = balance_loss(&Matrix::from_rows(&rows).unwrap(), &selected, k).unwrap();
        prop_assert!(b >= 0.0);

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        // expert e moves to column perm[e]
        let moved: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut out = vec![0.0; n];
                for (e, &p) in perm.iter().enumerate() {
                    out[p] = r[e];
                }
                out
            })
            .collect();
        let moved_sel: Vec<Vec<usize>> = selected.iter().map(|s| s.iter().map(|&e| perm[e]).collect()).collect();
        let b2 = balance_loss(&Matrix::from_rows(&moved).unwrap(), &moved_sel, k).unwrap();
        prop_assert!((b - b2).abs() <= 1e-12);
    }

    #[test]
    fn lpr_vanishes_exactly_when_old_tokens_sit_on_expert_zero(t in 1usize..8, n in 2usize..5, seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let old: Vec<bool> = (0..t).map(|i| i == 0 || rng.uniform() < 0.5).collect();
        let mut certain = Matrix::zeros(t, n);
        for r in 0..t {
            if old[r] {
                certain.set(r, 0, 1.0);
            } else {
                certain.row_mut(r).copy_from_slice(&distribution(&(0..n).map(|_| rng.uniform() + 1e-3).collect::<Vec<_>>()));
            }
        }
        prop_assert_eq!(lpr_loss(std::slice::from_ref(&certain), &old).unwrap(), 0.0);
        let mut leaky = certain.clone();
        leaky.set(0, 0, 0.9);
        leaky.set(0, 1, 0.1);
        prop_assert!(lpr_loss(&[certain, leaky], &old).unwrap() > 0.0);
    }

    #[test]
    fn similarity_ignores_per_row_positive_scale(q in 2usize..20, h in 2usize..10, seed in 0u64..1000) {
        let a = matrix(q, h, seed);
        let b = matrix(q + 1, h, seed + 1);
        let mut rng = SeededRng::new(seed + 2);
        let mut a2 = a.clone();
        for r in 0..q {
            let c = 0.01 + 10.0 * rng.uniform();
            a2.row_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        let set = |m: Matrix, lang: &str| CandidateSet::new(lang, 0, m).unwrap();
        let s1 = pair_similarity(&set(a, "a"), &set(b.clone(), "b")).unwrap();
        let s2 = pair_similarity(&set(a2, "a"), &set(b, "b")).unwrap();
        prop_assert!((s1 - s2).abs() <= 1e-12);
    }

    #[test]
    fn outer_layers_get_at_least_the_middle_minimum(m in 6usize..30, extra in 0usize..60, depth in 0.1f64..0.8, seed in 0u64..1000) {
        // profiles peaking in the middle, as real models produce
        let mut rng = SeededRng::new(seed);
        let s: Vec<f64> = (0..m)
            .map(|i| {
                let x = i as f64 / (m - 1) as f64;
                0.1 + depth * (std::f64::consts::PI * x).sin() + 0.02 * rng.uniform()
            })
            .collect();
        let counts = allocate(&s, m + extra).unwrap().new_experts();
        let third = m / 3;
        let middle = counts[third..m - third].iter().min().unwrap();
        let outer = counts[..third].iter().chain(&counts[m - third..]).max().unwrap();
        prop_assert!(middle <= outer);
    }

    #[test]
    fn old_mask_follows_group_tags(seed in 0u64..1000, old_first in any::<bool>()) {
        let specs = layout_languages(&[("a", "g0"), ("b", "g1"), ("c", "g1")], 8, 8, 0.5, seed);
        let corpus = generate(&specs, 40, 8, seed).unwrap();
        let old_group = if old_first { "g0" } else { "g1" };
        let mask = corpus.old_mask(&[old_group.to_string()].into());
        for (s, m) in corpus.sequences.iter().zip(&mask) {
            prop_assert_eq!(m.len(), s.tokens.len());
            // BOS never counts as old
            for (&tok, &v) in s.tokens.iter().zip(m) {
                prop_assert_eq!(v, tok != BOS && s.group == old_group);
            }
        }
        prop_assert_eq!(generate(&specs, 40, 8, seed).unwrap(), corpus);
    }

    #[test]
    fn checkpoints_roundtrip_after_any_expansions(
        counts in prop::collection::vec(prop::collection::vec(0usize..3, 2), 0..3),
        classifier in prop::option::of(0usize..2),
        seed in 0u64..100,
    ) {
        let mut cfg = ModelConfig::toy();
        (cfg.layers, cfg.hidden, cfg.heads, cfg.ffn, cfg.vocab, cfg.context, cfg.seed) = (2, 8, 2, 8, 16, 4, seed);
        let mut model = MoeModel::dense(cfg).unwrap();
        for (i, c) in counts.iter().enumerate() {
            model = model.upcycle(&AllocationPlan::from_counts(c, AllocationStrategy::External), &format!("g{}", i + 1)).unwrap();
        }
        if let (Some(l), false) = (classifier, model.history.is_empty()) {
            model.reset_classifiers(&[l]).unwrap();
            if let Some(w) = model.param_mut(ParamKey::Classifier(l)) {
                w.data_mut().iter_mut().for_each(|v| *v = 0.25);
            }
        }
        let bytes = model.to_bytes().unwrap();
        let back = MoeModel::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(&back, &model);
        // history accounts for every added expert
        for l in 0..2 {
            let added: usize = model.history.iter().map(|e| e.new_experts[l]).sum();
            prop_assert_eq!(model.expert_counts()[l], 1 + added);
        }
    }
}
