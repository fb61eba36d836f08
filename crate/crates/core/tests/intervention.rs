// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use factlab_core::corpus::{build_world, generate_documents, CorpusConfig, DocumentSet, WorldSpec};
use factlab_core::freq::{percentile_bins, BinAssignment, Criterion};
use factlab_core::harness::{
    build_prompt_set, class_counts, class_proportions, frequency_items, run_behavior_suite, template_texts,
    AnswerClass, BehaviorRecord, PromptInstance,
};
use factlab_core::intervention::{
    alpha_sweep, apply_and_measure, default_alpha_grid, flip_matrix, frequency_effect_after_intervention,
    generalization_test, InterventionSet, InterventionSpec, SweepDirection,
};
use factlab_core::model::{train, Checkpoint, Model, ModelConfig, TensorId, TrainConfig};
use factlab_core::vocab::Vocabulary;
use factlab_core::Error;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    world: WorldSpec,
    vocab: Vocabulary,
    docs: DocumentSet,
    model: Checkpoint,
    prompts: Vec<PromptInstance>,
    baseline: Vec<BehaviorRecord>,
}

/// A briefly trained 10-country model; behavior is mixed enough to exercise
/// every bookkeeping path.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = build_world(3, 10, 1.2).unwrap();
        let ccfg = CorpusConfig {
            total_docs: 1500,
            ..CorpusConfig::default()
        };
        let (vocab, docs) = generate_documents(&world, &ccfg, 4, &template_texts()).unwrap();
        let mcfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 32,
            vocab_size: vocab.len(),
            max_context: 48,
            mlp_multiple: 4,
        };
        let tcfg = TrainConfig {
            steps: 150,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 20,
            log_every: 50,
            ..TrainConfig::default()
        };
        let model = train(&docs, vocab.eot_id(), mcfg, &tcfg, 5, None).unwrap().model;
        let prompts = build_prompt_set(&world, &vocab, 0).unwrap();
        let baseline = run_behavior_suite(&model, &vocab, &prompts, 8, None);
        Fixture {
            world,
            vocab,
            docs,
            model,
            prompts,
            baseline,
        }
    })
}

fn scrambled(seed: u64) -> Checkpoint {
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 32,
        vocab_size: 23,
        max_context: 16,
        mlp_multiple: 4,
    };
    let mut m = Model::<f32>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in m.data_mut() {
        *x = rng.random_range(-0.4..0.4);
    }
    m
}

fn random_prompt(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let len = rng.random_range(1..=10);
    (0..len).map(|_| rng.random_range(0..23)).collect()
}

fn one(layer: usize, head: usize, alpha: f64) -> InterventionSet {
    InterventionSet::single(InterventionSpec { layer, head, alpha })
}

#[test]
fn unit_alpha_reproduces_greedy_decodes_on_1000_prompts() {
    let m = scrambled(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let iv = one(1, 2, 1.0);
    for _ in 0..1000 {
        let p = random_prompt(&mut rng);
        assert_eq!(
            m.greedy_decode(&p, 4, None, None).unwrap(),
            m.greedy_decode(&p, 4, None, Some(&iv)).unwrap()
        );
    }
}

#[test]
fn zero_alpha_equals_weight_ablation() {
    let m = scrambled(3);
    let cfg = *m.config();
    let dh = cfg.d_head();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (l, h) in [(0, 0), (1, 3), (2, 1)] {
        let mut ablated = m.clone();
        let wo = ablated.get_mut(TensorId::Wo(l));
        for x in &mut wo[h * dh * cfg.d_model..(h + 1) * dh * cfg.d_model] {
            *x = 0.0;
        }
        let iv = one(l, h, 0.0);
        for _ in 0..50 {
            let p = random_prompt(&mut rng);
            let a = m.forward(&p, None, Some(&iv)).unwrap().logits;
            let b = ablated.forward(&p, None, None).unwrap().logits;
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "head {l}.{h}");
        }
    }
}

#[test]
fn earlier_layers_are_untouched() {
    let m = scrambled(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let iv = one(2, 1, -0.7);
    for _ in 0..30 {
        let p = random_prompt(&mut rng);
        let pos = p.len() - 1;
        let a = m.forward(&p, Some(pos), None).unwrap().trace.unwrap();
        let b = m.forward(&p, Some(pos), Some(&iv)).unwrap().trace.unwrap();
        assert_eq!(a.embed, b.embed);
        for l in 0..2 {
            assert_eq!(a.heads[l], b.heads[l]);
            assert_eq!(a.attn_out[l], b.attn_out[l]);
            assert_eq!(a.mlp_out[l], b.mlp_out[l]);
        }
        // Same attention pattern on the first affected layer, so the head's
        // result is exactly alpha times the baseline one.
        for (x, y) in a.heads[2][1].iter().zip(&b.heads[2][1]) {
            assert!((y - -0.7 * x).abs() <= 1e-6 * (1.0 + x.abs()));
        }
        assert_eq!(a.heads[2][0], b.heads[2][0]);
    }
}

#[test]
fn parameters_are_never_mutated() {
    let m = scrambled(7);
    let before = m.to_bytes();
    let iv = InterventionSet::new([
        InterventionSpec {
            layer: 0,
            head: 1,
            alpha: 2.5,
        },
        InterventionSpec {
            layer: 2,
            head: 0,
            alpha: -1.0,
        },
    ])
    .unwrap();
    m.greedy_decode(&[1, 2, 3], 6, None, Some(&iv)).unwrap();
    assert_eq!(before, m.to_bytes());
}

#[test]
fn default_grid_covers_the_plotted_range() {
    let g = default_alpha_grid();
    assert_eq!(g.len(), 51);
    assert_eq!((g[0], g[50]), (-2.0, 3.0));
    assert!(g.contains(&1.0) && g.contains(&-0.7) && g.contains(&0.0));
}

#[test]
fn sweep_requires_unit_alpha() {
    let f = fixture();
    let err = alpha_sweep(&f.model, &f.vocab, (0, 0), SweepDirection::MemoryDown, &[0.5], &f.prompts, &f.baseline, 8);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn unit_only_grid_returns_baseline() {
    let f = fixture();
    let c = alpha_sweep(&f.model, &f.vocab, (0, 1), SweepDirection::MemoryDown, &[1.0], &f.prompts, &f.baseline, 8)
        .unwrap();
    assert_eq!(c.best_alpha, 1.0);
    assert_eq!(c.points[0].proportions, class_proportions(&f.baseline));
    assert_eq!(c.points[0].criterion, 0.0);
}

#[test]
fn sweep_points_match_independent_runs() {
    let f = fixture();
    let grid = [-1.0, 0.0, 1.0, 2.0];
    for dir in SweepDirection::ALL {
        let c = alpha_sweep(&f.model, &f.vocab, (0, 0), dir, &grid, &f.prompts, &f.baseline, 8).unwrap();
        assert!(dir.admits(c.best_alpha));
        let best = c.point(c.best_alpha).unwrap().criterion;
        for p in &c.points {
            let recs = run_behavior_suite(&f.model, &f.vocab, &f.prompts, 8, Some(&one(0, 0, p.alpha)));
            assert_eq!(p.proportions, class_proportions(&recs));
            assert!((p.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Recount the flip criterion directly from the records.
            let (from, to) = dir.flip();
            let pairs: Vec<_> = f.baseline.iter().zip(&recs).filter(|(b, _)| b.class == from).collect();
            let want = if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().filter(|(_, r)| r.class == to).count() as f64 / pairs.len() as f64
            };
            assert_eq!(p.criterion, want);
            if dir.admits(p.alpha) {
                assert!(p.criterion <= best);
            }
        }
    }
}

#[test]
fn unit_intervention_has_zero_deltas() {
    let f = fixture();
    let m = apply_and_measure(&f.model, &f.vocab, &one(0, 1, 1.0), &f.prompts, &f.baseline, 8).unwrap();
    assert_eq!(m.deltas, [0.0; 3]);
    let counts = class_counts(&f.baseline);
    for c in AnswerClass::ALL {
        let i = c.index();
        assert_eq!(m.flips[i][i], counts[i]);
    }
}

#[test]
fn flip_rows_conserve_baseline_counts() {
    let f = fixture();
    let m = apply_and_measure(&f.model, &f.vocab, &one(0, 0, -1.5), &f.prompts, &f.baseline, 8).unwrap();
    let counts = class_counts(&f.baseline);
    let after = class_counts(&m.records);
    for i in 0..3 {
        assert_eq!(m.flips[i].iter().sum::<usize>(), counts[i]);
        assert_eq!((0..3).map(|j| m.flips[j][i]).sum::<usize>(), after[i]);
    }
    assert_eq!(m.flips, flip_matrix(&f.baseline, &m.records));
    assert!(m.to_tsv().starts_with("# schema: factlab.intervention/1"));
}

#[test]
fn mismatched_baseline_is_rejected() {
    let f = fixture();
    let short = &f.baseline[1..];
    let r = apply_and_measure(&f.model, &f.vocab, &one(0, 0, 0.0), &f.prompts, short, 8);
    assert!(matches!(r, Err(Error::Input(_))));
    let mut shuffled = f.baseline.clone();
    shuffled.swap(0, 1);
    let r = apply_and_measure(&f.model, &f.vocab, &one(0, 0, 0.0), &f.prompts, &shuffled, 8);
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn generalization_uses_the_same_measurement() {
    let f = fixture();
    let r = generalization_test(&f.model, &f.vocab, &one(0, 0, 1.0), &f.prompts, &f.baseline, 8);
    assert!(matches!(r, Err(Error::Input(_))));

    let p1 = build_prompt_set(&f.world, &f.vocab, 1).unwrap();
    let b1 = run_behavior_suite(&f.model, &f.vocab, &p1, 8, None);
    let m = generalization_test(&f.model, &f.vocab, &one(0, 0, 1.0), &p1, &b1, 8).unwrap();
    assert_eq!(m.deltas, [0.0; 3]);
    let n = b1.len() as f64;
    let recount = AnswerClass::ALL.map(|c| b1.iter().filter(|r| r.class == c).count() as f64 / n);
    assert_eq!(m.baseline, recount);

    let g = generalization_test(&f.model, &f.vocab, &one(0, 1, 0.0), &p1, &b1, 8).unwrap();
    let a = apply_and_measure(&f.model, &f.vocab, &one(0, 1, 0.0), &p1, &b1, 8).unwrap();
    assert_eq!((g.deltas, g.flips), (a.deltas, a.flips));
}

fn country_bins(f: &Fixture) -> BinAssignment {
    let items = frequency_items(&f.world, &f.vocab, &f.docs, 0, Criterion::Country).unwrap();
    percentile_bins(Criterion::Country, &items, 5).unwrap()
}

/// Closed-form slope written independently of the library helper.
fn slope_oracle(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let sx: f64 = (0..ys.len()).map(|i| i as f64).sum();
    let sxx: f64 = (0..ys.len()).map(|i| (i * i) as f64).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| i as f64 * y).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[test]
fn frequency_effect_pairs_and_slopes() {
    let f = fixture();
    let bins = country_bins(f);
    let same = frequency_effect_after_intervention(&f.baseline, &f.baseline, &bins).unwrap();
    assert_eq!(same.baseline, same.intervened);
    assert_eq!(same.baseline_slopes, same.intervened_slopes);

    let m = apply_and_measure(&f.model, &f.vocab, &one(0, 1, -1.0), &f.prompts, &f.baseline, 8).unwrap();
    let fe = frequency_effect_after_intervention(&f.baseline, &m.records, &bins).unwrap();
    for c in AnswerClass::ALL {
        let want = slope_oracle(&fe.intervened.column(c));
        assert!((fe.intervened_slopes[c.index()] - want).abs() < 1e-12);
        let want = slope_oracle(&fe.baseline.column(c));
        assert!((fe.baseline_slopes[c.index()] - want).abs() < 1e-12);
    }

    // Every record memorized: flat curves, zero slopes.
    let flat: Vec<BehaviorRecord> = f
        .baseline
        .iter()
        .cloned()
        .map(|mut r| {
            r.class = AnswerClass::Memorized;
            r
        })
        .collect();
    let fe = frequency_effect_after_intervention(&flat, &flat, &bins).unwrap();
    assert_eq!(fe.intervened_slopes, [0.0; 3]);
}

#[test]
fn monotone_path_check() {
    use factlab_core::intervention::{SweepCurve, SweepRun};
    let run = |alpha: f64, mem: f64| SweepRun {
        alpha,
        proportions: [1.0 - mem, mem, 0.0],
        flips: [[0; 3]; 3],
    };
    let runs = [run(-0.5, 0.2), run(0.0, 0.3), run(0.5, 0.3), run(1.0, 0.6), run(1.5, 0.1)];
    let mut c = SweepCurve::from_runs(0, 0, SweepDirection::MemoryDown, &runs);
    c.best_alpha = -0.5;
    assert!(c.nonincreasing_toward_best(AnswerClass::Memorized));
    c.best_alpha = 1.5;
    assert!(c.nonincreasing_toward_best(AnswerClass::Memorized));
    let runs = [run(0.0, 0.3), run(0.5, 0.4), run(1.0, 0.35)];
    let mut c = SweepCurve::from_runs(0, 0, SweepDirection::MemoryDown, &runs);
    c.best_alpha = 0.0;
    assert!(!c.nonincreasing_toward_best(AnswerClass::Memorized));
}
