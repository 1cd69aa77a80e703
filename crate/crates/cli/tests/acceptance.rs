//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown:
//! `cargo test -p sip-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use sip_core::attribution::{occlusion_map, planted_image, OcclusionConfig};
use sip_core::hash::rng_from_seed;
use sip_core::inference::{bag, BackendDescriptor, BackendKind, Decision, MockPlanted, ScoreVector};
use sip_core::metrics::{agreement, bootstrap, compute_metrics, BootstrapConfig, LabeledPrediction, MetricKind};
use sip_core::prompting::{build_single, PromptMode};
use sip_core::selection::{select_references_with, SelectionError, StrategyKind, PROJECTION, SEX, VIEW};
use sip_core::sft::{select_query_set, sweep_k, ExperimentRecipe};
use sip_core::{synth, CandidateAnswerSet, Catalog, EmbeddingTable, Execution, ImageRecord, PromptBundle, PromptTemplate, SelectionStrategy, Split};
use sip_stub::{StubConfig, StubServer};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn sip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sip"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("sip binary runs")
}

fn sip_ok(args: &[&str]) -> Result<String, String> {
    let out = sip(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("sip {} failed ({}): {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr)))
    }
}

// --- 1. selection properties -------------------------------------------------

fn random_strategy(catalog: &Catalog, seed: u64) -> (SelectionStrategy, Vec<String>) {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let k = rng.random_range(1..=4);
    let mut all: Vec<String> = catalog.records().iter().map(|r| r.id.clone()).collect();
    all.sort();
    match seed % 5 {
        0 => (SelectionStrategy::random(k, seed), all),
        1 => (SelectionStrategy::bagging(k.max(2), seed), all),
        2 => (SelectionStrategy::embedding(k, seed), all),
        3 => {
            let mut attrs = vec![SEX, VIEW, PROJECTION];
            attrs.shuffle(&mut rng);
            attrs.truncate(rng.random_range(1..=3));
            (SelectionStrategy::demographic(attrs, k, seed), all)
        }
        _ => {
            let centers: Vec<&str> = catalog.centers().into_iter().collect();
            let center = centers[rng.random_range(0..centers.len())].to_string();
            let queries = all.into_iter().filter(|id| catalog.get(id).unwrap().center != center).collect();
            (SelectionStrategy::cross_center(center, k, seed), queries)
        }
    }
}

fn base_pool<'a>(catalog: &'a Catalog, query: &str, s: &SelectionStrategy) -> Vec<&'a ImageRecord> {
    catalog
        .records()
        .iter()
        .filter(|r| r.id != query && r.split == Split::Train && catalog.is_negative(&r.id))
        .filter(|r| s.reference_center.as_ref().is_none_or(|c| &r.center == c))
        .collect()
}

fn criterion_1() -> Check {
    let (mut checked, mut empty) = (0usize, 0usize);
    for seed in 0..1000u64 {
        let catalog = synth::random_catalog(seed);
        let (s, queries) = random_strategy(&catalog, seed);
        if queries.is_empty() {
            continue;
        }
        let a = match select_references_with(&catalog, &queries, &s, Execution::Sequential) {
            Err(SelectionError::EmptyPool { .. }) => {
                ensure(queries.iter().any(|q| base_pool(&catalog, q, &s).is_empty()), || format!("seed {seed}: spurious empty pool"))?;
                empty += 1;
                continue;
            }
            Err(e) => return Err(format!("seed {seed}: {e}")),
            Ok(a) => a,
        };
        let again = select_references_with(&catalog, &queries, &s, Execution::Parallel).map_err(err)?;
        ensure(serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&again).unwrap(), || format!("seed {seed}: not deterministic"))?;
        for asg in &a {
            let q = catalog.get(&asg.query_id).unwrap();
            let pool = base_pool(&catalog, &q.id, &s);
            let unique: BTreeSet<&String> = asg.reference_ids.iter().collect();
            ensure(unique.len() == asg.reference_ids.len(), || format!("seed {seed}: duplicate reference"))?;
            for id in &asg.reference_ids {
                let r = catalog.get(id).unwrap();
                ensure(id != &q.id, || format!("seed {seed}: {id} references itself"))?;
                ensure(catalog.is_negative(id) && r.split == Split::Train, || format!("seed {seed}: {id} not a negative train image"))?;
                if let Some(c) = &s.reference_center {
                    ensure(&r.center == c, || format!("seed {seed}: {id} from wrong center"))?;
                }
            }
            let available = if s.kind == StrategyKind::Demographic {
                let matched = asg.matched_attributes.as_ref().ok_or("demographic without matched attributes")?;
                ensure(s.match_attributes.starts_with(matched), || format!("seed {seed}: matched attributes not a prefix"))?;
                for id in &asg.reference_ids {
                    let r = catalog.get(id).unwrap();
                    ensure(matched.iter().all(|m| r.attribute(m) == q.attribute(m)), || format!("seed {seed}: {id} attribute mismatch"))?;
                }
                // Longest prefix with any candidate.
                let (len, n) = (0..=s.match_attributes.len())
                    .rev()
                    .map(|l| (l, pool.iter().filter(|r| s.match_attributes[..l].iter().all(|m| r.attribute(m) == q.attribute(m))).count()))
                    .find(|&(_, n)| n > 0)
                    .unwrap();
                ensure(matched.len() == len, || format!("seed {seed}: relaxed further than needed"))?;
                ensure(asg.relaxed() == (len < s.match_attributes.len()), || format!("seed {seed}: relaxation not recorded"))?;
                n
            } else {
                pool.len()
            };
            ensure(asg.achieved_k() == s.k.min(available), || format!("seed {seed}: achieved {} of {}", asg.achieved_k(), s.k))?;
            ensure(asg.pool_exhausted == (available < s.k), || format!("seed {seed}: pool_exhausted flag wrong"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} assignments over 1000 catalogs, {empty} empty-pool errors confirmed"))
}

// --- 2. retrieval oracle -----------------------------------------------------

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn criterion_2() -> Check {
    let mut compared = 0;
    for inst in 0..200u64 {
        let mut rng = rng_from_seed(1000 + inst);
        let n = rng.random_range(2..=1999);
        let dim = rng.random_range(1..=64);
        let k = rng.random_range(1..=10);
        let mut table = EmbeddingTable::new(dim).unwrap();
        let mut records = Vec::with_capacity(n + 1);
        let mut add = |id: String, label: &str, split, rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            table.push(id.clone(), &v).unwrap();
            records.push(ImageRecord {
                uri: format!("synth://{id}"),
                id,
                label: label.into(),
                attributes: BTreeMap::new(),
                center: "A".into(),
                split,
                embedding_ref: None,
            });
        };
        add("query".into(), "pos", Split::Test, &mut rng);
        for i in 0..n {
            add(format!("v{i:05}"), "neg", Split::Train, &mut rng);
        }
        let catalog = Catalog::new("t", vec!["neg".into()], vec!["pos".into()], records, Some(table)).map_err(err)?;
        let qv = catalog.embedding("query").unwrap().to_vec();
        let mut ranked: Vec<(String, f64)> = catalog
            .records()
            .iter()
            .filter(|r| r.id != "query")
            .map(|r| (r.id.clone(), brute_cosine(&qv, catalog.embedding(&r.id).unwrap())))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for kk in [1, k] {
            let s = SelectionStrategy::embedding(kk, 0);
            let got = select_references_with(&catalog, &["query".to_string()], &s, Execution::Sequential).map_err(err)?;
            let want: Vec<String> = ranked.iter().take(kk).map(|r| r.0.clone()).collect();
            ensure(got[0].reference_ids == want, || format!("instance {inst}: k={kk} got {:?}, want {want:?}", got[0].reference_ids))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} top-1/top-k retrievals identical to brute force"))
}

// --- 3. metrics oracle -------------------------------------------------------

fn oracle_bacc(p: &[LabeledPrediction], classes: &[String]) -> f64 {
    let recalls: Vec<f64> = classes
        .iter()
        .filter_map(|c| {
            let support = p.iter().filter(|x| &x.gold == c).count();
            let hit = p.iter().filter(|x| &x.gold == c && x.predicted.as_ref() == Some(c)).count();
            (support > 0).then(|| hit as f64 / support as f64)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn oracle_f1_of(p: &[LabeledPrediction], c: &str) -> Option<f64> {
    let tp = p.iter().filter(|x| x.gold == c && x.predicted.as_deref() == Some(c)).count() as f64;
    let fp = p.iter().filter(|x| x.gold != c && x.predicted.as_deref() == Some(c)).count() as f64;
    let fneg = p.iter().filter(|x| x.gold == c && x.predicted.as_deref() != Some(c)).count() as f64;
    let d = 2.0 * tp + fp + fneg;
    (d > 0.0).then(|| 2.0 * tp / d)
}

fn oracle_kappa(a: &[LabeledPrediction], b: &[LabeledPrediction]) -> (f64, f64) {
    let n = a.len() as f64;
    let po = a.iter().zip(b).filter(|(x, y)| x.predicted == y.predicted).count() as f64 / n;
    let cats: BTreeSet<Option<String>> = a.iter().chain(b).map(|x| x.predicted.clone()).collect();
    let pe: f64 = cats
        .iter()
        .map(|c| {
            let fa = a.iter().filter(|x| &x.predicted == c).count() as f64 / n;
            let fb = b.iter().filter(|x| &x.predicted == c).count() as f64 / n;
            fa * fb
        })
        .sum();
    let kappa = if pe == 1.0 { if po == 1.0 { 1.0 } else { 0.0 } } else { (po - pe) / (1.0 - pe) };
    (kappa, 100.0 * po)
}

fn random_preds(rng: &mut rand_chacha::ChaCha8Rng, n: usize, classes: &[String], gold: Option<&[String]>) -> Vec<LabeledPrediction> {
    (0..n)
        .map(|i| {
            let g = match gold {
                Some(g) => g[i].clone(),
                None => classes[rng.random_range(0..classes.len())].clone(),
            };
            let predicted = if rng.random_bool(0.1) {
                None
            } else if rng.random_bool(0.6) {
                Some(g.clone())
            } else {
                Some(classes[rng.random_range(0..classes.len())].clone())
            };
            LabeledPrediction { query_id: format!("q{i:04}"), gold: g, predicted }
        })
        .collect()
}

fn worked_example() -> Vec<LabeledPrediction> {
    let mut out = Vec::new();
    let mut push = |gold: &str, pred: &str, n: usize| {
        for _ in 0..n {
            out.push(LabeledPrediction { query_id: format!("w{}", out.len()), gold: gold.into(), predicted: Some(pred.into()) });
        }
    };
    push("yes", "yes", 2);
    push("yes", "no", 2);
    push("no", "no", 3);
    push("no", "yes", 1);
    out
}

fn criterion_3() -> Check {
    const TOL: f64 = 1e-12;
    let close = |a: f64, b: f64| (a - b).abs() <= TOL;
    for inst in 0..1000u64 {
        let mut rng = rng_from_seed(5000 + inst);
        let binary = inst % 2 == 0;
        let cands = if binary { CandidateAnswerSet::binary("t") } else { CandidateAnswerSet::new("t", ["a", "b", "c"]).unwrap() };
        let classes = cands.answers().to_vec();
        let n = rng.random_range(1..=200);
        let a = random_preds(&mut rng, n, &classes, None);
        let golds: Vec<String> = a.iter().map(|x| x.gold.clone()).collect();
        let b = random_preds(&mut rng, n, &classes, Some(&golds));
        let positive = binary.then_some("yes");
        let m = compute_metrics(&a, &cands, positive).map_err(err)?;
        let f1 = if binary {
            oracle_f1_of(&a, "yes").unwrap_or(0.0)
        } else {
            let per: Vec<f64> = classes.iter().filter_map(|c| oracle_f1_of(&a, c)).collect();
            per.iter().sum::<f64>() / per.len() as f64
        };
        ensure(close(m.bacc, oracle_bacc(&a, &classes)), || format!("instance {inst}: bacc {} vs {}", m.bacc, oracle_bacc(&a, &classes)))?;
        ensure(close(m.f1, f1), || format!("instance {inst}: f1 {} vs {f1}", m.f1))?;
        let ag = agreement(&a, &b).map_err(err)?;
        let (kappa, pct) = oracle_kappa(&a, &b);
        ensure(close(ag.kappa, kappa), || format!("instance {inst}: kappa {} vs {kappa}", ag.kappa))?;
        ensure(close(ag.agreement_pct, pct), || format!("instance {inst}: agreement {} vs {pct}", ag.agreement_pct))?;
    }
    let m = compute_metrics(&worked_example(), &CandidateAnswerSet::binary("t"), Some("yes")).map_err(err)?;
    ensure(m.bacc == 0.625, || format!("worked example bacc {}", m.bacc))?;
    ensure(format!("{:.4}", m.f1) == "0.5714", || format!("worked example f1 {}", m.f1))?;
    Ok(format!("1000 instances within 1e-12; worked example bacc {} f1 {:.4}", m.bacc, m.f1))
}

// --- 4. bootstrap sanity -----------------------------------------------------

fn criterion_4() -> Check {
    let cands = CandidateAnswerSet::binary("t");
    let mut rng = rng_from_seed(4);
    let preds: Vec<LabeledPrediction> = (0..500)
        .map(|i| {
            let gold = if i % 2 == 0 { "yes" } else { "no" };
            let other = if gold == "yes" { "no" } else { "yes" };
            let predicted = if rng.random_bool(0.8) { gold } else { other };
            LabeledPrediction { query_id: format!("q{i:03}"), gold: gold.into(), predicted: Some(predicted.into()) }
        })
        .collect();
    let config = BootstrapConfig { replicates: 2000, seed: 0, exec: Execution::Parallel };
    let b = bootstrap(&preds, &cands, Some("yes"), MetricKind::Bacc, &config, Some(("self", &preds))).map_err(err)?;
    let gap = (b.mean - b.point_estimate).abs();
    ensure(gap < 0.005, || format!("|mean - point| = {gap}"))?;
    ensure(b.std > 0.0, || "zero std".into())?;
    let p = b.paired.as_ref().ok_or("no paired result")?;
    ensure(p.max_abs_difference == 0.0 && p.mean_difference == 0.0, || format!("self differences {}", p.max_abs_difference))?;
    Ok(format!("point {:.4}, mean {:.4}, std {:.4}, self-diff 0", b.point_estimate, b.mean, b.std))
}

// --- 5. bagging oracle -------------------------------------------------------

fn vote(answer: Option<&str>) -> Decision {
    let bundle = PromptBundle {
        mode: PromptMode::Comparative,
        image_slots: Vec::new(),
        instruction: String::new(),
        candidates: CandidateAnswerSet::binary("t"),
        template_id: "t".into(),
    };
    let mut d = Decision::new("q", &bundle, ScoreVector::logprob(vec![0.0, 0.0])).unwrap();
    d.chosen = answer.map(String::from);
    d
}

fn criterion_5() -> Check {
    let mut cases = 0;
    for n_cands in [2usize, 3] {
        let answers: Vec<String> = ["a", "b", "c"][..n_cands].iter().map(|s| s.to_string()).collect();
        let cands = CandidateAnswerSet::new("t", answers.clone()).unwrap();
        for k in [3u32, 5, 7] {
            let options = n_cands + 1;
            for code in 0..options.pow(k) {
                let mut c = code;
                let votes: Vec<Option<usize>> = (0..k)
                    .map(|_| {
                        let v = c % options;
                        c /= options;
                        (v < n_cands).then_some(v)
                    })
                    .collect();
                let mut counts = vec![0usize; n_cands];
                let abstain = votes.iter().filter(|v| v.is_none()).count();
                for v in votes.iter().flatten() {
                    counts[*v] += 1;
                }
                let max = *counts.iter().max().unwrap();
                let best = counts.iter().position(|&x| x == max).unwrap();
                let want = (max >= abstain).then(|| answers[best].clone());
                let decisions = votes.iter().map(|v| vote(v.map(|i| answers[i].as_str()))).collect();
                let got = bag(decisions, &cands).map_err(err)?;
                ensure(got.final_answer == want, || format!("votes {votes:?}: {:?} vs {want:?}", got.final_answer))?;
                let total: usize = got.vote_counts.values().sum::<usize>() + got.abstain_votes;
                ensure(total == k as usize, || format!("votes {votes:?}: counts sum to {total}"))?;
                for (i, a) in answers.iter().enumerate() {
                    ensure(got.vote_counts[a] == counts[i], || format!("votes {votes:?}: count of {a}"))?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} vote vectors match exhaustive counting"))
}

// --- 6. fixed-budget schedules -----------------------------------------------

fn criterion_6() -> Check {
    let counts = synth::table3().into_iter().find(|c| c.task == "Pneumonia").unwrap();
    let catalog = synth::table3_catalog(&counts, 0);
    let recipe = ExperimentRecipe::bundled("Pneumonia").ok_or("no bundled recipe")?;
    ensure(recipe.queries_per_class == 500, || "recipe is not 500 queries".into())?;
    let queries = select_query_set(&catalog, &recipe).map_err(err)?;
    let ks = [1, 5, 10, 20, 30];
    let sets = sweep_k(&catalog, &recipe, &queries, &ks, &PromptTemplate::default(), Execution::Parallel).map_err(err)?;
    let mut updates = BTreeSet::new();
    for ((_, ds), k) in sets.iter().zip(ks) {
        let s = &ds.schedule;
        ensure(ds.tuples.len() == 500 * k, || format!("k={k}: {} tuples", ds.tuples.len()))?;
        ensure(s.is_group_atomic(&ds.tuples), || format!("k={k}: schedule splits a group"))?;
        for &w in &s.windows {
            let starts_group = w == 0 || ds.tuples[w - 1].group_id != ds.tuples[w].group_id;
            ensure(starts_group && ds.tuples[w].k_index == 0, || format!("k={k}: window at {w} is inside a group"))?;
        }
        let mut bounds = s.windows.clone();
        bounds.push(ds.tuples.len());
        for pair in bounds.windows(2) {
            let groups: BTreeSet<&str> = ds.tuples[pair[0]..pair[1]].iter().map(|t| t.group_id.as_str()).collect();
            ensure(groups.len() <= recipe.base_accumulation, || format!("k={k}: window holds {} groups", groups.len()))?;
        }
        updates.insert(s.planned_optimizer_updates);
    }
    ensure(updates.len() == 1, || format!("optimizer updates differ across k: {updates:?}"))?;
    Ok(format!("tuples 500k for k in {ks:?}; {} optimizer updates at every k", updates.first().unwrap()))
}

// --- 7. nuisance simulation --------------------------------------------------

fn criterion_7(dir: &Path) -> Check {
    let d = dir.join("nuisance");
    let ds = d.to_str().unwrap();
    sip_ok(&["fixture", "nuisance", "--out", ds, "--pairs", "1000"])?;
    let images = fs::read_dir(d.join("images")).map_err(err)?.count();
    ensure(images == 2000, || format!("{images} images"))?;
    let cfg = d.join("config.toml");
    let cfg = cfg.to_str().unwrap();
    sip_ok(&["infer", "--config", cfg, "--mode", "single"])?;
    sip_ok(&["infer", "--config", cfg, "--mode", "comparative"])?;
    let out = d.join("out");
    let single = out.join("decisions.single.log");
    let comp = out.join("decisions.comparative.log");
    sip_ok(&[
        "evaluate",
        "--config",
        cfg,
        "--bootstrap-B",
        "1000",
        "--log",
        comp.to_str().unwrap(),
        "--log",
        single.to_str().unwrap(),
        "--comparator",
        single.to_str().unwrap(),
    ])?;
    let rows: Vec<serde_json::Value> = fs::read_to_string(out.join("evaluation.csv.jsonl"))
        .map_err(err)?
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let bacc = |i: usize| rows[i]["report"]["bacc"].as_f64().unwrap();
    let (c, s) = (bacc(0), bacc(1));
    let p = rows[0]["bacc_bootstrap"]["paired"]["p_value"].as_f64().ok_or("no paired test")?;
    ensure(c >= 0.95, || format!("comparative bacc {c}"))?;
    ensure(s <= 0.75, || format!("single bacc {s}"))?;
    ensure(p < 0.01, || format!("paired p = {p}"))?;
    Ok(format!("comparative bacc {c:.4}, single bacc {s:.4}, paired bootstrap p = {p}"))
}

// --- 8. attribution fidelity -------------------------------------------------

fn planted(dir: &Path, name: &str, rect: (u32, u32, u32, u32)) -> Result<(PromptBundle, MockPlanted), String> {
    let path = dir.join(format!("{name}.png"));
    planted_image((336, 336), rect, 30, 230).save(&path).map_err(err)?;
    let record = ImageRecord {
        id: name.into(),
        uri: path.display().to_string(),
        label: "pos".into(),
        attributes: BTreeMap::new(),
        center: "A".into(),
        split: Split::Test,
        embedding_ref: None,
    };
    let bundle = build_single(&record, &PromptTemplate::default(), &CandidateAnswerSet::binary("t")).map_err(err)?;
    let desc = BackendDescriptor::mock(BackendKind::MockPlanted)
        .with_param("rect_x0", rect.0 as f64)
        .with_param("rect_y0", rect.1 as f64)
        .with_param("rect_x1", rect.2 as f64)
        .with_param("rect_y1", rect.3 as f64);
    Ok((bundle, MockPlanted::new(desc)))
}

fn argmax(grid: &[f64]) -> usize {
    (0..grid.len()).fold(0, |b, i| if grid[i] > grid[b] { i } else { b })
}

fn criterion_8(dir: &Path) -> Check {
    let dir = dir.join("planted");
    fs::create_dir_all(&dir).map_err(err)?;
    let config = OcclusionConfig::default();
    let (bundle, backend) = planted(&dir, "square", (104, 104, 168, 168))?;
    let map = occlusion_map(&bundle, &backend, &config, "yes", Execution::Parallel).map_err(err)?;
    ensure((map.rows, map.cols) == (20, 20), || format!("grid {}x{}", map.rows, map.cols))?;
    ensure(map.backend_calls == 401, || format!("{} backend calls", map.backend_calls))?;
    // Cells whose window overlaps the rectangle.
    let overlaps = |c: usize, lo: u32, hi: u32| (c as u32) * 16 < hi && (c as u32) * 16 + 32 > lo;
    let footprint: BTreeSet<usize> = (0..400).filter(|&i| overlaps(i / 20, 104, 168) && overlaps(i % 20, 104, 168)).collect();
    let top: BTreeSet<usize> = map.ranked_cells(&map.smoothed).into_iter().take(40).collect();
    let inter = top.intersection(&footprint).count() as f64;
    let iou = inter / top.union(&footprint).count() as f64;
    ensure(iou >= 0.5, || format!("top-decile IoU {iou}"))?;
    let mut peaks = Vec::new();
    for a in [5u32, 6] {
        let rect = (16 * a + 8, 16 * 5 + 8, 16 * a + 24, 16 * 5 + 24);
        let (bundle, backend) = planted(&dir, &format!("shift{a}"), rect)?;
        let m = occlusion_map(&bundle, &backend, &config, "yes", Execution::Parallel).map_err(err)?;
        peaks.push((argmax(&m.raw), argmax(&m.smoothed)));
    }
    let (p0, p1) = (peaks[0], peaks[1]);
    ensure(p1.0 == p0.0 + 1 && p1.1 == p0.1 + 1, || format!("argmax moved {p0:?} -> {p1:?}"))?;
    ensure(p0.0 == 5 * 20 + 5, || format!("argmax at cell {}", p0.0))?;
    Ok(format!("20x20 grid, 401 calls, top-decile IoU {iou:.3}, one-stride shift moves argmax one cell"))
}

// --- 9. protocol conformance -------------------------------------------------

fn criterion_9(dir: &Path) -> Check {
    let d = dir.join("protocol");
    let ds = d.to_str().unwrap();
    sip_ok(&["fixture", "protocol", "--out", ds])?;
    let cfg = d.join("config.toml");
    let cfg = cfg.to_str().unwrap();
    let server = StubServer::start(StubConfig::default()).map_err(err)?;
    let url = server.url();
    sip_ok(&["select", "--config", cfg, "--strategy", "SVP", "--k", "2"])?;
    sip_ok(&["infer", "--config", cfg, "--strategy", "SVP", "--k", "2", "--backend", &url])?;
    let calls = server.request_count();
    ensure(calls == 20, || format!("{calls} requests for 20 queries"))?;
    let eval = sip_ok(&["evaluate", "--config", cfg, "--strategy", "SVP", "--k", "2", "--bootstrap-B", "200"])?;
    let table = fs::read_to_string(d.join("out/evaluation.csv")).map_err(err)?;
    ensure(table.lines().count() == 2 && table.lines().nth(1).unwrap().contains(",20,"), || format!("evaluation table: {table}"))?;

    let log = d.join("out/decisions.comparative.log");
    let full = fs::read(&log).map_err(err)?;
    let fresh = d.join("out/fresh.log");
    sip_ok(&["infer", "--config", cfg, "--strategy", "SVP", "--k", "2", "--backend", &url, "--log", fresh.to_str().unwrap()])?;
    ensure(fs::read(&fresh).map_err(err)? == full, || "independent run differs".into())?;
    let cut = full.len() * 3 / 5;
    ensure(full[cut - 1] != b'\n', || "cut landed on a line boundary".into())?;
    fs::write(&log, &full[..cut]).map_err(err)?;
    let before = server.request_count();
    sip_ok(&["infer", "--config", cfg, "--strategy", "SVP", "--k", "2", "--backend", &url])?;
    let resumed = server.request_count() - before;
    ensure(fs::read(&log).map_err(err)? == full, || "resumed log differs from the uninterrupted one".into())?;
    ensure(resumed > 0 && resumed < 20, || format!("resume issued {resumed} requests"))?;
    let bacc_line = eval.lines().next().unwrap_or_default().to_string();
    Ok(format!("select -> infer -> evaluate over HTTP ({bacc_line}); resume after truncation byte-identical with {resumed} requests"))
}

// --- 10. table shape ---------------------------------------------------------

fn criterion_10(dir: &Path) -> Check {
    let d = dir.join("strategies");
    let ds = d.to_str().unwrap();
    sip_ok(&["fixture", "strategy", "--out", ds])?;
    let cfg = d.join("config.toml");
    sip_ok(&["compare-strategies", "--config", cfg.to_str().unwrap(), "--bootstrap-B", "200"])?;
    let mut reader = csv::Reader::from_path(d.join("out/strategies.csv")).map_err(err)?;
    let header: Vec<String> = reader.headers().map_err(err)?.iter().map(String::from).collect();
    for col in ["strategy", "bacc", "f1", "kappa", "agree"] {
        ensure(header.iter().any(|h| h == col), || format!("missing column {col}"))?;
    }
    let idx = |c: &str| header.iter().position(|h| h == c).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(err)?;
    let labels: Vec<&str> = rows.iter().map(|r| &r[idx("strategy")]).collect();
    ensure(labels == ["SVP", "SV", "SP", "VP", "S", "V", "P", "CC", "EB", "RS"], || format!("rows {labels:?}"))?;
    for r in &rows {
        let label = &r[idx("strategy")];
        for c in ["bacc", "f1"] {
            ensure(r[idx(c)].parse::<f64>().is_ok(), || format!("{label}: {c} is not a number"))?;
        }
        if label == "RS" {
            ensure(r[idx("kappa")].is_empty() && r[idx("agree")].is_empty(), || "RS kappa/agree not blank".into())?;
        } else {
            ensure(r[idx("kappa_x100")] == *"100" && r[idx("kappa")] == *"1", || format!("{label}: kappa {}", &r[idx("kappa")]))?;
            ensure(r[idx("agree")] == *"100", || format!("{label}: agree {}", &r[idx("agree")]))?;
        }
    }
    Ok("9 strategies + RS baseline; kappa = 1 and agree = 100 for forced-identical decisions, RS blank".into())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let checks: Vec<(u8, &str, Option<u64>, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "selection properties", Some(30), Box::new(criterion_1)),
        (2, "retrieval oracle", Some(60), Box::new(criterion_2)),
        (3, "metrics oracle", Some(30), Box::new(criterion_3)),
        (4, "bootstrap sanity", Some(60), Box::new(criterion_4)),
        (5, "bagging oracle", None, Box::new(criterion_5)),
        (6, "fixed-budget schedules", None, Box::new(criterion_6)),
        (7, "nuisance simulation", Some(120), Box::new(|| criterion_7(dir))),
        (8, "attribution fidelity", Some(60), Box::new(|| criterion_8(dir))),
        (9, "protocol conformance", None, Box::new(|| criterion_9(dir))),
        (10, "table shape", None, Box::new(|| criterion_10(dir))),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in &checks {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > Duration::from_secs(*l) => Err(format!("took {elapsed:.1?}, limit {l} s")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail}; {:.1} s)", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({why}; {:.1} s)", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
