//! Randomized invariants of the library.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use snare_core::data::{
    Candidate, Fold, FoldAssignment, FoldTable, Mode, ObjectEntry, ReferringExpression,
    TaskInstance, ViewIndex,
};
use snare_core::evaluation::{evaluate, summarize, EvalOptions};
use snare_core::grounding::{ViewMode, ZeroShot};
use snare_core::store::{decode_store, encode_store, normalize, EmbeddingVector, StoreEntries, StoreMeta};
use snare_core::synth::{separable, SynthConfig};
use snare_core::tools::{
    classify_pairs, lexical_profile, split_folds, CategoryInput, HypernymClosure, ObjectPair,
    SplitConfig, WordVectorTable,
};

fn finite_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e3f32..1e3, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalize_gives_unit_norm_and_is_idempotent(v in finite_vec(16)) {
        let e = EmbeddingVector::new(v).unwrap();
        prop_assume!(e.norm() > 1e-3);
        let n = normalize(&e).unwrap();
        prop_assert!((n.norm() - 1.0).abs() < 1e-5);
        let twice = normalize(&n).unwrap();
        for (a, b) in n.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn store_round_trip_is_bitwise(
        dim in 1usize..12,
        language in prop::collection::btree_map("[a-z]{1,6}", any::<u32>(), 0..6),
        vision in prop::collection::btree_map(("[a-z]{1,4}", 0usize..8), any::<u32>(), 0..10),
    ) {
        // Arbitrary finite bit patterns, negative zero and subnormals included.
        let vector = |seed: u32| {
            let v = (0..dim as u32)
                .map(|i| {
                    let f = f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i * 7919));
                    if f.is_finite() { f } else { -0.0 }
                })
                .collect();
            EmbeddingVector::new(v).unwrap()
        };
        let entries = StoreEntries {
            meta: StoreMeta::new("enc", dim),
            language: language.iter().map(|(k, s)| (k.clone(), vector(*s))).collect(),
            vision: vision
                .iter()
                .map(|((o, v), s)| (o.clone(), ViewIndex::new(*v).unwrap(), vector(*s)))
                .collect(),
        };
        let bytes = encode_store(&entries).unwrap();
        let back = decode_store(&bytes).unwrap().to_entries();
        let bits = |e: &EmbeddingVector| e.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(back.language.len(), entries.language.len());
        for (a, b) in back.language.iter().zip(&entries.language) {
            prop_assert_eq!(&a.0, &b.0);
            prop_assert_eq!(bits(&a.1), bits(&b.1));
        }
        for (a, b) in back.vision.iter().zip(&entries.vision) {
            prop_assert_eq!((&a.0, a.1), (&b.0, b.1));
            prop_assert_eq!(bits(&a.2), bits(&b.2));
        }
        prop_assert_eq!(encode_store(&back).unwrap(), bytes);
    }

    #[test]
    fn view_rotation_is_a_cyclic_group(v in 0usize..8, a in -20i64..20, b in -20i64..20) {
        let x = ViewIndex::new(v).unwrap();
        prop_assert_eq!(x.rotate(a).rotate(b), x.rotate(a + b));
        prop_assert_eq!(x.rotate(a).rotate(-a), x);
        prop_assert_eq!(x.rotate(8), x);
        prop_assert!(x.rotate(a).get() < 8);
    }
}

const WORDS: [&str; 6] = ["chair", "table", "lamp", "sofa", "bed", "shelf"];

fn word_table() -> WordVectorTable {
    WordVectorTable::from_pairs(WORDS.iter().enumerate().map(|(i, w)| {
        let v: Vec<f32> = (0..4).map(|j| ((i * 5 + j * 3) % 7) as f32 - 3.0 + 0.1 * j as f32).collect();
        (*w, v)
    }))
    .unwrap()
}

fn split_config() -> SplitConfig {
    SplitConfig {
        anchors: BTreeMap::from([
            (Fold::Train, vec!["chair".to_string()]),
            (Fold::Val, vec!["lamp".to_string()]),
            (Fold::Test, vec!["bed".to_string()]),
        ]),
        proportions: BTreeMap::from([(Fold::Train, 0.7), (Fold::Val, 0.1), (Fold::Test, 0.2)]),
    }
}

fn categories() -> impl Strategy<Value = Vec<CategoryInput>> {
    prop::collection::btree_map("[A-Z][a-z]{2,6}", (0usize..WORDS.len(), 1usize..40), 1..25).prop_map(
        |m| {
            m.into_iter()
                .map(|(name, (w, n))| CategoryInput {
                    category: name,
                    descriptor: WORDS[w].to_string(),
                    object_count: n,
                })
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_deterministic_partition(cats in categories(), rot in 0usize..25) {
        let table = word_table();
        let config = split_config();
        let first = split_folds(&cats, &table, &config).unwrap();
        let assigned: Vec<&str> = first.assignments.iter().map(|a| a.category.as_str()).collect();
        let unique: BTreeSet<&str> = assigned.iter().copied().collect();
        prop_assert_eq!(assigned.len(), cats.len());
        prop_assert_eq!(unique.len(), cats.len());
        for c in &cats {
            prop_assert!(unique.contains(c.category.as_str()));
        }
        let again = split_folds(&cats, &table, &config).unwrap();
        prop_assert_eq!(&again, &first);

        // Input order does not matter.
        let mut rotated = cats.clone();
        rotated.rotate_left(rot % cats.len());
        let sorted = |o: &[FoldAssignment]| {
            o.iter().map(|a| (a.category.clone(), a.fold)).collect::<BTreeMap<_, _>>()
        };
        let r = split_folds(&rotated, &table, &config).unwrap();
        prop_assert_eq!(sorted(&r.assignments), sorted(&first.assignments));
    }

    #[test]
    fn pair_classification_accounts_for_every_pair(
        pairs in prop::collection::vec((0usize..30, 0usize..30, 1usize..20), 1..60),
    ) {
        let fold_of = |o: usize| [Fold::Train, Fold::Val, Fold::Test][o % 3];
        let folds = FoldTable::from_assignments((0..30).map(|o| FoldAssignment {
            category: format!("k{o}"),
            fold: fold_of(o),
        }))
        .unwrap();
        let pairs: Vec<ObjectPair> = pairs
            .into_iter()
            .filter(|(a, b, _)| a != b)
            .map(|(a, b, n)| ObjectPair {
                object_a: format!("o{a}"),
                category_a: format!("k{a}"),
                object_b: format!("o{b}"),
                category_b: format!("k{b}"),
                expressions: n,
            })
            .collect();
        prop_assume!(!pairs.is_empty());
        let (report, flags) = classify_pairs(&pairs, &folds).unwrap();
        prop_assert_eq!(flags.len(), pairs.len());
        prop_assert_eq!(report.rows.iter().map(|r| r.pairs).sum::<usize>(), pairs.len());
        prop_assert_eq!(report.total_pairs, pairs.len());
        let total: usize = pairs.iter().map(|p| p.expressions).sum();
        prop_assert_eq!(report.rows.iter().map(|r| r.expressions).sum::<usize>(), total);
        prop_assert_eq!(report.total_expressions, total);
    }

    #[test]
    fn lexical_profile_is_bounded_and_order_free(
        texts in prop::collection::vec(("(red|blue|round|the|a|chair|crimson|square|!)( (red|blue|round|the|a|chair|crimson|square|!)){0,8}", any::<bool>()), 0..30),
        rot in 0usize..30,
    ) {
        let closure = HypernymClosure::from_pairs([
            ("red", "color"),
            ("blue", "color"),
            ("crimson", "red"),
            ("crimson", "color"),
            ("round", "shape"),
            ("square", "shape"),
        ])
        .unwrap();
        let exprs: Vec<ReferringExpression> = texts
            .iter()
            .enumerate()
            .map(|(i, (t, visual))| {
                let mode = if *visual { Mode::Visual } else { Mode::Blindfolded };
                ReferringExpression::new(format!("e{i}"), t.clone(), mode).unwrap()
            })
            .collect();
        let targets = ["color", "shape"];
        let profile = lexical_profile(&exprs, &closure, &targets);
        for m in &profile.modes {
            for t in targets {
                let c = m.counts[t];
                prop_assert!(c <= m.tokens);
                let p = m.percent[t];
                prop_assert!((0.0..=100.0).contains(&p));
                if m.tokens == 0 {
                    prop_assert!(m.zero_denominator);
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
        let mut rotated = exprs.clone();
        if !rotated.is_empty() {
            rotated.rotate_left(rot % exprs.len());
        }
        prop_assert_eq!(lexical_profile(&rotated, &closure, &targets), profile);
    }
}

fn small_fixture(seed: u64) -> snare_core::synth::SynthFixture {
    separable(&SynthConfig {
        seed,
        dim: 24,
        concepts: 4,
        train_objects_per_concept: 2,
        val_objects_per_concept: 2,
        train_instances: 8,
        val_instances: 24,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn swap(inst: &TaskInstance) -> TaskInstance {
    TaskInstance::new(
        inst.instance_id.clone(),
        inst.expression.clone(),
        Arc::clone(&inst.object_b),
        Arc::clone(&inst.object_a),
        inst.gold.other(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evaluation_ignores_order_and_worker_count(
        seed in 0u64..1000,
        view_seed in any::<u64>(),
        rot in 0usize..24,
        workers in 1usize..6,
        mode in prop::sample::select(vec![ViewMode::Single, ViewMode::Two, ViewMode::All8]),
    ) {
        let f = small_fixture(seed);
        let val = f.validation();
        let s = (mode != ViewMode::All8).then_some(view_seed);
        let base = evaluate(&ZeroShot, &val, &f.store, mode, s, "val", &EvalOptions { workers: Some(1), ..EvalOptions::default() }).unwrap();

        let parallel = evaluate(&ZeroShot, &val, &f.store, mode, s, "val", &EvalOptions { workers: Some(workers), ..EvalOptions::default() }).unwrap();
        prop_assert_eq!(&parallel.log, &base.log);
        prop_assert_eq!(&parallel.report, &base.report);

        let mut shuffled = val.clone();
        shuffled.rotate_left(rot % val.len());
        let moved = evaluate(&ZeroShot, &shuffled, &f.store, mode, s, "val", &EvalOptions::default()).unwrap();
        prop_assert_eq!(&moved.report, &base.report);
        let by_id = |log: &[snare_core::evaluation::PredictionRecord]| {
            log.iter().map(|r| (r.instance_id.clone(), r.clone())).collect::<BTreeMap<_, _>>()
        };
        prop_assert_eq!(by_id(&moved.log), by_id(&base.log));

        // The report is a pure function of the log.
        let again = summarize(&base.report.model, mode, "val", s, &base.log, Vec::new());
        prop_assert_eq!(again, base.report.clone());
        prop_assert_eq!(base.report.overall.correct, base.log.iter().filter(|r| r.correct).count());
    }

    #[test]
    fn swapping_candidates_mirrors_predictions(seed in 0u64..1000) {
        let f = small_fixture(seed);
        let val = f.validation();
        let swapped: Vec<TaskInstance> = val.iter().map(swap).collect();
        let opts = EvalOptions::default();
        let a = evaluate(&ZeroShot, &val, &f.store, ViewMode::All8, None, "val", &opts).unwrap();
        let b = evaluate(&ZeroShot, &swapped, &f.store, ViewMode::All8, None, "val", &opts).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            prop_assert_eq!(x.score_a, y.score_b);
            prop_assert_eq!(x.score_b, y.score_a);
            prop_assert_eq!(x.correct, y.correct);
            if !x.tie {
                prop_assert_eq!(x.choice, y.choice.other());
            }
        }
        prop_assert_eq!(a.report.overall, b.report.overall);
    }
}

#[test]
fn ties_choose_candidate_a() {
    let f = small_fixture(1);
    let inst = &f.validation()[0];
    let same = TaskInstance::new(
        "tie",
        inst.expression.clone(),
        Arc::new(ObjectEntry::with_default_views("twin-1", "c00-val")),
        Arc::new(ObjectEntry::with_default_views("twin-2", "c00-val")),
        Candidate::B,
    )
    .unwrap();
    let mut store = f.store.clone();
    let view = f.store.lookup_view(&inst.object_a.object_id, ViewIndex::new(0).unwrap()).unwrap().clone();
    for twin in ["twin-1", "twin-2"] {
        for v in ViewIndex::all() {
            store.insert_view(twin, v, view.clone()).unwrap();
        }
    }
    let e = evaluate(&ZeroShot, &[same], &store, ViewMode::All8, None, "val", &EvalOptions::default()).unwrap();
    assert!(e.log[0].tie);
    assert_eq!(e.log[0].choice, Candidate::A);
    assert_eq!(e.report.ties, 1);
}
