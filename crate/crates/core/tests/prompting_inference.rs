use std::fs;

use proptest::prelude::*;
use rand::seq::SliceRandom;

use sip_core::hash::rng_from_seed;
use sip_core::inference::{
    bag, decide, read_decision_log, run_experiment, BackendDescriptor, BackendKind, Decision, ExperimentPlan, MockHash,
    MockNuisance, RemoteBackend, RunMode, ScoringMode,
};
use sip_core::metrics::{compute_metrics, labeled_predictions};
use sip_core::prompting::{build_comparative, build_single, PromptMode, SlotRole, TaskVocabulary};
use sip_core::selection::select_references;
use sip_core::{synth, Backend, CandidateAnswerSet, PromptTemplate, ScoreVector, SelectionStrategy, Split};
use sip_stub::{StubConfig, StubServer};

fn test_ids(catalog: &sip_core::Catalog) -> Vec<String> {
    let mut ids: Vec<String> = catalog.records().iter().filter(|r| r.split == Split::Test).map(|r| r.id.clone()).collect();
    ids.sort();
    ids
}

#[test]
fn bundles_are_pure_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = synth::protocol_fixture(dir.path(), 1).unwrap();
    let vocab = TaskVocabulary::for_catalog(&catalog);
    let template = PromptTemplate::default();
    let queries = test_ids(&catalog);
    let assignments = select_references(&catalog, &queries, &SelectionStrategy::random(3, 2)).unwrap();
    for a in &assignments {
        for per_pair in [false, true] {
            let x = build_comparative(a, &catalog, &template, &vocab.candidates, per_pair).unwrap();
            let y = build_comparative(a, &catalog, &template, &vocab.candidates, per_pair).unwrap();
            assert_eq!(x.len(), if per_pair { 3 } else { 1 });
            for (b, c) in x.iter().zip(&y) {
                assert_eq!(b.canonical_bytes(), c.canonical_bytes());
                assert_eq!(b.image_slots[0].role, SlotRole::Query);
                assert_eq!(b.image_slots[0].record_id, a.query_id);
                assert!(b.image_slots[1..].iter().all(|s| s.role == SlotRole::Reference));
                assert_eq!(b.candidates, vocab.candidates);
            }
        }
        let s = build_single(catalog.get(&a.query_id).unwrap(), &template, &vocab.candidates).unwrap();
        assert_eq!((s.mode, s.image_slots.len()), (PromptMode::Single, 1));
    }
}

proptest! {
    #[test]
    fn decide_ignores_constant_shifts(scores in prop::collection::vec(-50.0f64..0.0, 2..6), shift in -100.0f64..100.0) {
        let answers: Vec<String> = (0..scores.len()).map(|i| format!("c{i}")).collect();
        let cands = CandidateAnswerSet::new("t", answers).unwrap();
        let base = decide(&ScoreVector::logprob(scores.clone()), &cands).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let moved = decide(&ScoreVector::logprob(shifted.clone()), &cands).unwrap();
        // Shifting can merge or split floating-point ties; compare only when it did not.
        let ties = |v: &[f64]| { let m = v.iter().cloned().fold(f64::MIN, f64::max); v.iter().filter(|&&x| x == m).count() };
        prop_assume!(ties(&scores) == ties(&shifted));
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn bag_is_order_independent(votes in prop::collection::vec(prop::option::weighted(0.85, 0usize..3), 1..9), seed in any::<u64>()) {
        let cands = CandidateAnswerSet::new("t", ["a", "b", "c"]).unwrap();
        let bundle = build_bundle(&cands);
        let make = |v: &[Option<usize>]| -> Vec<Decision> {
            v.iter().map(|c| {
                let mut d = Decision::new("q", &bundle, ScoreVector::logprob(vec![0.0; 3])).unwrap();
                d.chosen = c.map(|i| cands.answers()[i].clone());
                d
            }).collect()
        };
        let mut shuffled = votes.clone();
        shuffled.shuffle(&mut rng_from_seed(seed));
        let a = bag(make(&votes), &cands).unwrap();
        let b = bag(make(&shuffled), &cands).unwrap();
        prop_assert_eq!(a.final_answer, b.final_answer);
        prop_assert_eq!(a.vote_counts, b.vote_counts);
        prop_assert_eq!(a.tie_broken, b.tie_broken);
    }
}

fn build_bundle(cands: &CandidateAnswerSet) -> sip_core::PromptBundle {
    sip_core::PromptBundle {
        mode: PromptMode::Comparative,
        image_slots: Vec::new(),
        instruction: String::new(),
        candidates: cands.clone(),
        template_id: "t".into(),
    }
}

#[test]
fn resume_from_any_prefix_matches_uninterrupted_log() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = synth::protocol_fixture(&dir.path().join("img"), 5).unwrap();
    let queries = test_ids(&catalog);
    let assignments = select_references(&catalog, &queries, &SelectionStrategy::bagging(3, 1)).unwrap();
    let template = PromptTemplate::default();
    let backend = MockHash::new(BackendDescriptor::mock(BackendKind::MockHash));
    let plan = |path: std::path::PathBuf| ExperimentPlan {
        catalog: &catalog,
        query_ids: queries.clone(),
        assignments: &assignments,
        template: &template,
        candidates: CandidateAnswerSet::binary("Edema"),
        mode: RunMode::Bagging,
        seed: 1,
        log_path: path,
        timestamp: Some(0),
    };
    let full_path = dir.path().join("full.log");
    run_experiment(&plan(full_path.clone()), &backend).unwrap();
    let full = fs::read(&full_path).unwrap();
    for cut in (0..full.len()).step_by(full.len() / 13) {
        let path = dir.path().join(format!("cut{cut}.log"));
        fs::write(&path, &full[..cut]).unwrap();
        run_experiment(&plan(path.clone()), &backend).unwrap();
        assert_eq!(fs::read(&path).unwrap(), full, "cut at byte {cut}");
    }
}

#[test]
fn remote_client_never_retries_good_answers() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = synth::protocol_fixture(dir.path(), 2).unwrap();
    let vocab = TaskVocabulary::for_catalog(&catalog);
    let bundle = build_single(catalog.get("p00").unwrap(), &PromptTemplate::default(), &vocab.candidates).unwrap();
    let server = StubServer::start(StubConfig::default()).unwrap();
    let mut desc = BackendDescriptor::remote(server.url(), "m");
    desc.retry.backoff_secs = 0.01;
    let backend = RemoteBackend::new(desc.clone()).unwrap();
    for _ in 0..5 {
        sip_core::inference::score(&bundle, &backend).unwrap();
    }
    assert_eq!(server.request_count(), 5);

    let flaky = StubServer::start(StubConfig { fail_first: 2, ..StubConfig::default() }).unwrap();
    let backend = RemoteBackend::new(BackendDescriptor { endpoint: Some(flaky.url()), ..desc.clone() }).unwrap();
    sip_core::inference::score(&bundle, &backend).unwrap();
    assert_eq!(flaky.request_count(), 3);

    let down = StubServer::start(StubConfig { fail_first: usize::MAX, ..StubConfig::default() }).unwrap();
    let backend = RemoteBackend::new(BackendDescriptor { endpoint: Some(down.url()), ..desc.clone() }).unwrap();
    assert!(sip_core::inference::score(&bundle, &backend).is_err());
    assert_eq!(down.request_count(), desc.retry.attempts as usize);

    let generating = StubServer::start(StubConfig { generation: Some("The answer is yes.".into()), ..StubConfig::default() }).unwrap();
    let backend = RemoteBackend::new(BackendDescriptor { endpoint: Some(generating.url()), scoring: ScoringMode::Generate, ..desc }).unwrap();
    let d = Decision::new("p00", &bundle, sip_core::inference::score(&bundle, &backend).unwrap()).unwrap();
    assert_eq!(d.chosen.as_deref(), Some("yes"));
}

#[test]
fn nuisance_comparative_beats_single() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = synth::nuisance_dataset(dir.path(), 200, 3).unwrap();
    let queries = test_ids(&catalog);
    let assignments = select_references(&catalog, &queries, &SelectionStrategy::demographic(["scanner"], 1, 0)).unwrap();
    let template = PromptTemplate::default();
    let backend = MockNuisance::new(BackendDescriptor::mock(BackendKind::MockNuisance).with_param("comparative_bias", 0.05));
    let bacc = |mode| {
        let log = dir.path().join(format!("{mode}.log"));
        let plan = ExperimentPlan {
            catalog: &catalog,
            query_ids: queries.clone(),
            assignments: &assignments,
            template: &template,
            candidates: CandidateAnswerSet::binary("Disease"),
            mode,
            seed: 0,
            log_path: log.clone(),
            timestamp: Some(0),
        };
        run_experiment(&plan, &backend as &dyn Backend).unwrap();
        let (_, records) = read_decision_log(&log).unwrap();
        let preds = labeled_predictions(&records, &catalog).unwrap();
        compute_metrics(&preds, &CandidateAnswerSet::binary("Disease"), Some("yes")).unwrap().bacc
    };
    let (single, comparative) = (bacc(RunMode::Single), bacc(RunMode::Comparative));
    assert!(comparative > single, "{comparative} vs {single}");
    assert_eq!(comparative, 1.0);
}
