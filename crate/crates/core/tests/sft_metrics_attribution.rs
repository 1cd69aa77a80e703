use std::collections::BTreeSet;

use num_rational::Ratio;
use proptest::prelude::*;

use sip_core::attribution::{gaussian_smooth, occlusion_map, percentile, renormalize, OcclusionConfig};
use sip_core::inference::{BackendDescriptor, BackendKind, MockHash};
use sip_core::metrics::{agreement, bootstrap, compute_metrics, BootstrapConfig, LabeledPrediction, MetricKind};
use sip_core::prompting::{build_single, TaskVocabulary};
use sip_core::selection::{select_negative_subset, SubsetMethod};
use sip_core::sft::{build_single_dataset, select_query_set, sweep_k, ExperimentRecipe};
use sip_core::{synth, CandidateAnswerSet, Execution, PromptTemplate};

type Q = Ratio<i64>;

fn pneumonia() -> (sip_core::Catalog, ExperimentRecipe) {
    let counts = synth::table3().into_iter().find(|c| c.task == "Pneumonia").unwrap();
    let catalog = synth::table3_catalog(&counts, 1);
    let recipe = ExperimentRecipe { queries_per_class: 60, ..ExperimentRecipe::bundled("Pneumonia").unwrap() };
    (catalog, recipe)
}

#[test]
fn budget_is_fixed_across_k_and_baselines() {
    let (catalog, recipe) = pneumonia();
    let queries = select_query_set(&catalog, &recipe).unwrap();
    let template = PromptTemplate::default();
    let sets = sweep_k(&catalog, &recipe, &queries, &[1, 2, 7], &template, Execution::Parallel).unwrap();
    let mut updates: BTreeSet<usize> = sets.iter().map(|(_, d)| d.schedule.planned_optimizer_updates).collect();
    for n in [10, 200] {
        let negatives = select_negative_subset(&catalog, SubsetMethod::Rand, n, 3, Execution::Sequential).unwrap();
        let single = build_single_dataset(&catalog, &recipe, &queries, &negatives, &template).unwrap();
        assert_eq!(single.tuples.len(), queries.len() + n);
        updates.insert(single.schedule.planned_optimizer_updates);
    }
    assert_eq!(updates.len(), 1, "{updates:?}");
    for (_, d) in &sets {
        assert!(d.schedule.is_group_atomic(&d.tuples));
    }
}

#[test]
fn tuples_are_deterministic_and_labeled_correctly() {
    let (catalog, recipe) = pneumonia();
    let queries = select_query_set(&catalog, &recipe).unwrap();
    let template = PromptTemplate::default();
    let vocab = TaskVocabulary::for_catalog(&catalog);
    let a = sweep_k(&catalog, &recipe, &queries, &[3], &template, Execution::Parallel).unwrap();
    let b = sweep_k(&catalog, &recipe, &queries, &[3], &template, Execution::Sequential).unwrap();
    assert_eq!(a[0].1.tuple_text(), b[0].1.tuple_text());
    for t in &a[0].1.tuples {
        assert_eq!(t.reference_ids.len(), 1);
        assert!(catalog.is_negative(&t.reference_ids[0]));
        let q = catalog.get(&t.query_id).unwrap();
        assert_eq!(Some(t.answer.as_str()), vocab.answer_for_label(&q.label));
    }
}

fn preds_from(pairs: &[(usize, Option<usize>)], answers: &[String]) -> Vec<LabeledPrediction> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(g, p))| LabeledPrediction {
            query_id: format!("q{i:03}"),
            gold: answers[g].clone(),
            predicted: p.map(|p| answers[p].clone()),
        })
        .collect()
}

fn instance(max_vocab: usize) -> impl Strategy<Value = (usize, Vec<(usize, Option<usize>)>)> {
    (2..=max_vocab).prop_flat_map(|v| (Just(v), prop::collection::vec((0..v, prop::option::of(0..v)), 1..=50)))
}

/// Exact reference values, from the confusion counts.
fn rational_oracle(pairs: &[(usize, Option<usize>)], v: usize, positive: Option<usize>) -> (Q, Q) {
    let count = |f: &dyn Fn(&(usize, Option<usize>)) -> bool| pairs.iter().filter(|p| f(p)).count() as i64;
    let recalls: Vec<Q> = (0..v)
        .filter_map(|c| {
            let support = count(&|p| p.0 == c);
            (support > 0).then(|| Q::new(count(&|p| p.0 == c && p.1 == Some(c)), support))
        })
        .collect();
    let bacc = recalls.iter().fold(Q::from(0), |a, r| a + r) / Q::from(recalls.len() as i64);
    let f1_of = |c: usize| {
        let tp = count(&|p| p.0 == c && p.1 == Some(c));
        let d = 2 * tp + count(&|p| p.0 != c && p.1 == Some(c)) + count(&|p| p.0 == c && p.1 != Some(c));
        (d > 0).then(|| Q::new(2 * tp, d))
    };
    let f1 = match positive {
        Some(c) => f1_of(c).unwrap_or(Q::from(0)),
        None => {
            let per: Vec<Q> = (0..v).filter_map(f1_of).collect();
            per.iter().fold(Q::from(0), |a, r| a + r) / Q::from(per.len() as i64)
        }
    };
    (bacc, f1)
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_exact_oracle((v, pairs) in instance(4)) {
        let answers: Vec<String> = (0..v).map(|i| format!("a{i}")).collect();
        let cands = CandidateAnswerSet::new("t", answers.clone()).unwrap();
        let preds = preds_from(&pairs, &answers);
        let positive = (v == 2).then_some(0);
        let m = compute_metrics(&preds, &cands, positive.map(|p| answers[p].as_str())).unwrap();
        let (bacc, f1) = rational_oracle(&pairs, v, positive);
        prop_assert_eq!(m.bacc, to_f64(bacc));
        prop_assert_eq!(m.f1, to_f64(f1));
    }
}

proptest! {
    #[test]
    fn kappa_satisfies_the_defining_identity((v, pairs) in instance(4), flips in prop::collection::vec(prop::option::of(0usize..4), 50)) {
        let answers: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
        let a = preds_from(&pairs, &answers);
        let b: Vec<LabeledPrediction> = a
            .iter()
            .zip(&flips)
            .map(|(p, f)| LabeledPrediction { predicted: f.map(|i| answers[i % v].clone()), ..p.clone() })
            .collect();
        let r = agreement(&a, &b).unwrap();
        let n = a.len() as f64;
        let cats: BTreeSet<Option<&String>> = a.iter().chain(&b).map(|p| p.predicted.as_ref()).collect();
        let pe: f64 = cats
            .iter()
            .map(|c| {
                let fa = a.iter().filter(|p| p.predicted.as_ref() == *c).count() as f64 / n;
                let fb = b.iter().filter(|p| p.predicted.as_ref() == *c).count() as f64 / n;
                fa * fb
            })
            .sum();
        let po = r.agreement_pct / 100.0;
        if pe < 1.0 {
            prop_assert!((po - (r.kappa * (1.0 - pe) + pe)).abs() < 1e-12);
        }
        prop_assert!(r.kappa <= 1.0);
    }

    #[test]
    fn proportional_duplication_keeps_bacc((v, pairs) in instance(3), times in 2usize..4) {
        let answers: Vec<String> = (0..v).map(|i| format!("a{i}")).collect();
        let cands = CandidateAnswerSet::new("t", answers.clone()).unwrap();
        let dup: Vec<(usize, Option<usize>)> = pairs.iter().flat_map(|p| std::iter::repeat_n(*p, times)).collect();
        let a = compute_metrics(&preds_from(&pairs, &answers), &cands, None).unwrap();
        let b = compute_metrics(&preds_from(&dup, &answers), &cands, None).unwrap();
        prop_assert_eq!(a.bacc, b.bacc);
    }

    #[test]
    fn renormalize_preserves_order_inside_the_clip_range(grid in prop::collection::vec(-5.0f64..5.0, 4..80)) {
        let (lo, hi) = (percentile(&grid, 1.0), percentile(&grid, 99.0));
        let out = renormalize(&grid, (1.0, 99.0));
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                let inside = |x: f64| x >= lo && x <= hi;
                if inside(grid[i]) && inside(grid[j]) && grid[i] < grid[j] && hi > lo {
                    prop_assert!(out[i] < out[j]);
                }
            }
        }
    }

    #[test]
    fn zero_sigma_is_identity(grid in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        prop_assert_eq!(gaussian_smooth(&grid, 1, grid.len(), 0.0), grid);
    }
}

#[test]
fn bootstrap_is_reproducible() {
    let answers: Vec<String> = vec!["yes".into(), "no".into()];
    let pairs: Vec<(usize, Option<usize>)> = (0..120).map(|i| (i % 2, Some((i / 3) % 2))).collect();
    let preds = preds_from(&pairs, &answers);
    let cands = CandidateAnswerSet::binary("t");
    let config = |exec| BootstrapConfig { replicates: 300, seed: 9, exec };
    let a = bootstrap(&preds, &cands, Some("yes"), MetricKind::F1, &config(Execution::Parallel), None).unwrap();
    let b = bootstrap(&preds, &cands, Some("yes"), MetricKind::F1, &config(Execution::Sequential), None).unwrap();
    assert_eq!(a, b);
    let s = bootstrap(&preds, &cands, Some("yes"), MetricKind::Bacc, &config(Execution::Parallel), Some(("self", &preds))).unwrap();
    assert_eq!(s.paired.unwrap().max_abs_difference, 0.0);
}

#[test]
fn occlusion_calls_once_per_cell_plus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = synth::protocol_fixture(dir.path(), 0).unwrap();
    let vocab = TaskVocabulary::for_catalog(&catalog);
    let bundle = build_single(catalog.get("h03").unwrap(), &PromptTemplate::default(), &vocab.candidates).unwrap();
    let backend = MockHash::new(BackendDescriptor::mock(BackendKind::MockHash));
    let config = OcclusionConfig { resize: (64, 64), window: (16, 16), stride: 8, ..OcclusionConfig::default() };
    let map = occlusion_map(&bundle, &backend, &config, "no", Execution::Sequential).unwrap();
    assert_eq!((map.rows, map.cols, map.backend_calls), (7, 7, 50));
}
