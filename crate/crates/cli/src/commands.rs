use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use sip_core::attribution::{occlusion_map, write_layer, write_matrix_csv, write_overlay};
use sip_core::catalog::{load_manifest, SCHEMA_VERSION};
use sip_core::inference::{
    build_backend, read_decision_log, run_experiment, Backend, BackendKind, ExperimentPlan, RunMode, RunSummary,
};
use sip_core::metrics::{
    agreement, bootstrap, compute_metrics, labeled_predictions, write_table, BootstrapConfig, LabeledPrediction, MetricKind,
    SummaryRow, TableLayout,
};
use sip_core::prompting::{build_comparative, build_single, TaskVocabulary};
use sip_core::selection::{
    audit, read_assignments, select_negative_subset, select_references_with, write_assignments, write_subset,
    ReferenceAssignment, SubsetMethod,
};
use sip_core::sft::{build_single_dataset, select_query_set, sweep_k};
use sip_core::{synth, Catalog, Execution, Partition, Split};

use crate::config::{Overrides, RunConfig};
use crate::{Command, FixtureKind};

/// Exit status when any query ended in quarantine.
const EXIT_QUARANTINE: u8 = 3;

pub fn run(command: Command, overrides: &Overrides) -> Result<ExitCode> {
    match command {
        Command::Ingest { manifests } => ingest(&manifests, overrides.out.as_deref()),
        Command::Select { subset, subset_size } => select(&RunConfig::resolve(overrides)?, subset.as_deref(), subset_size),
        Command::Infer { assignments, log } => infer(&RunConfig::resolve(overrides)?, assignments, log),
        Command::BuildSft => build_sft(&RunConfig::resolve(overrides)?),
        Command::Evaluate { log, comparator } => evaluate(&RunConfig::resolve(overrides)?, log, comparator),
        Command::Attribute { query, assignments } => attribute(&RunConfig::resolve(overrides)?, &query, assignments),
        Command::CompareStrategies => compare_strategies(&RunConfig::resolve(overrides)?),
        Command::Fixture { kind, pairs } => {
            let out = overrides.out.clone().context("fixture needs --out")?;
            fixture(kind, &out, overrides.seed.unwrap_or(0), pairs)
        }
    }
}

fn ingest(manifests: &[PathBuf], out: Option<&Path>) -> Result<ExitCode> {
    if manifests.is_empty() {
        bail!("no manifests given");
    }
    let mut csv = String::from("manifest,task,records,test_positive,test_negative,train_positive,train_negative,embeddings\n");
    for m in manifests {
        let c = load_manifest(m, SCHEMA_VERSION).with_context(|| format!("loading {}", m.display()))?;
        let count = |split: Split, part: Partition| {
            c.records().iter().filter(|r| r.split == split && c.partition_of(&r.label) == Some(part)).count()
        };
        let line = format!(
            "{},{},{},{},{},{},{},{}",
            m.display(),
            c.task,
            c.len(),
            count(Split::Test, Partition::Positive),
            count(Split::Test, Partition::Negative),
            count(Split::Train, Partition::Positive),
            count(Split::Train, Partition::Negative),
            c.embeddings().map_or(0, |t| t.len()),
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ingest.csv"), csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn exec_for(cfg: &RunConfig) -> Execution {
    match cfg.backend.kind {
        BackendKind::Remote => Execution::Bounded(cfg.backend.max_parallel),
        _ => Execution::Parallel,
    }
}

fn assignments_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("assignments.jsonl")
}

fn assign(cfg: &RunConfig, catalog: &Catalog, label: &str, queries: &[String]) -> Result<Vec<ReferenceAssignment>> {
    let strategy = cfg.selection_strategy(label)?;
    Ok(select_references_with(catalog, queries, &strategy, Execution::Parallel)?)
}

fn select(cfg: &RunConfig, subset: Option<&str>, subset_size: Option<usize>) -> Result<ExitCode> {
    cfg.persist("select")?;
    let catalog = cfg.catalog()?;
    let queries = cfg.query_ids(&catalog);
    let assignments = assign(cfg, &catalog, &cfg.strategy.label, &queries)?;
    write_assignments(&assignments_path(cfg), &assignments)?;
    let summary = audit(&catalog, &assignments)?;
    fs::write(cfg.out.join("assignments.audit.csv"), summary.to_csv())?;
    println!(
        "{} assignments ({} strategy, k={}), {} pool-exhausted, {} relaxed",
        assignments.len(),
        cfg.strategy.label,
        cfg.strategy.k,
        summary.pool_exhausted,
        summary.relaxed
    );
    if let Some(method) = subset {
        let method: SubsetMethod = method.parse()?;
        let size = subset_size.context("--subset needs --subset-size")?;
        let s = select_negative_subset(&catalog, method, size, cfg.seed, Execution::Parallel)?;
        let path = cfg.out.join(format!("negatives.{method}.subset"));
        write_subset(&path, &s)?;
        println!("{} negatives ({method}) -> {}", s.ids.len(), path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn log_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(format!("decisions.{}.log", cfg.mode))
}

fn load_or_select(cfg: &RunConfig, catalog: &Catalog, queries: &[String], path: Option<PathBuf>) -> Result<Vec<ReferenceAssignment>> {
    if cfg.mode == RunMode::Single {
        return Ok(Vec::new());
    }
    let path = path.unwrap_or_else(|| assignments_path(cfg));
    if path.exists() {
        let a = read_assignments(&path)?;
        let want = cfg.selection_strategy(&cfg.strategy.label)?;
        if let Some(stale) = a.iter().find(|a| a.strategy != want) {
            bail!(
                "{} was made with strategy {} k={} seed={}; rerun `sip select` or pass --assignments",
                path.display(),
                stale.strategy.label(),
                stale.strategy.k,
                stale.strategy.seed
            );
        }
        return Ok(a);
    }
    let a = assign(cfg, catalog, &cfg.strategy.label, queries)?;
    write_assignments(&path, &a)?;
    Ok(a)
}

fn execute(cfg: &RunConfig, catalog: &Catalog, queries: Vec<String>, assignments: &[ReferenceAssignment], mode: RunMode, log: PathBuf, backend: &dyn Backend) -> Result<RunSummary> {
    let vocab = TaskVocabulary::for_catalog(catalog);
    let template = cfg.template()?;
    let plan = ExperimentPlan {
        catalog,
        query_ids: queries,
        assignments,
        template: &template,
        candidates: vocab.candidates,
        mode,
        seed: cfg.seed,
        log_path: log,
        timestamp: cfg.timestamp,
    };
    Ok(run_experiment(&plan, backend)?)
}

fn report_run(summary: &RunSummary) {
    println!(
        "{}: {} logged, {} already present, {} quarantined, {} backend calls",
        summary.log_path.display(),
        summary.logged,
        summary.skipped,
        summary.quarantined.len(),
        summary.score_calls
    );
    for q in &summary.quarantined {
        eprintln!("quarantined {}: {}", q.query_id, q.error);
    }
}

fn infer(cfg: &RunConfig, assignments: Option<PathBuf>, log: Option<PathBuf>) -> Result<ExitCode> {
    cfg.persist("infer")?;
    let catalog = cfg.catalog()?;
    let queries = cfg.query_ids(&catalog);
    let assigned = load_or_select(cfg, &catalog, &queries, assignments)?;
    let backend = build_backend(&cfg.backend)?;
    let summary = execute(cfg, &catalog, queries, &assigned, cfg.mode, log.unwrap_or_else(|| log_path(cfg)), backend.as_ref())?;
    report_run(&summary);
    Ok(if summary.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_QUARANTINE) })
}

fn predictions(path: &Path, catalog: &Catalog) -> Result<Vec<LabeledPrediction>> {
    let (_, records) = read_decision_log(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(labeled_predictions(&records, catalog)?)
}

fn stem(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().trim_end_matches(".log").to_string()).unwrap_or_default()
}

struct Scorer<'a> {
    cfg: &'a RunConfig,
    vocab: TaskVocabulary,
}

impl Scorer<'_> {
    fn row(&self, key: String, preds: &[LabeledPrediction], comparator: Option<(&str, &[LabeledPrediction])>) -> Result<SummaryRow> {
        let positive = self.vocab.positive_answer.as_deref();
        let report = compute_metrics(preds, &self.vocab.candidates, positive)?;
        let config = BootstrapConfig { replicates: self.cfg.metrics.bootstrap_b, seed: self.cfg.seed, exec: Execution::Parallel };
        let boot = |m: MetricKind| -> Result<_> {
            if !self.cfg.metrics.metrics.contains(&m) {
                return Ok(None);
            }
            Ok(Some(bootstrap(preds, &self.vocab.candidates, positive, m, &config, comparator)?))
        };
        Ok(SummaryRow { key, report, bacc_bootstrap: boot(MetricKind::Bacc)?, f1_bootstrap: boot(MetricKind::F1)?, agreement: None })
    }
}

fn print_row(row: &SummaryRow) {
    let mut line = format!("{}: n={} bacc={:.4} f1={:.4}", row.key, row.report.n, row.report.bacc, row.report.f1);
    for b in row.bacc_bootstrap.iter().chain(&row.f1_bootstrap) {
        line.push_str(&format!(" | {:?} {:.4} ± {:.4}", b.metric, b.mean, b.std));
        if let Some(p) = &b.paired {
            line.push_str(&format!(" vs {} diff={:.4} p={:.4}", p.comparator, p.mean_difference, p.p_value));
        }
    }
    if let Some(a) = &row.agreement {
        line.push_str(&format!(" | kappa={:.2} agree={:.2}%", a.kappa_pct, a.agreement_pct));
    }
    println!("{line}");
}

fn evaluate(cfg: &RunConfig, logs: Vec<PathBuf>, comparator: Option<PathBuf>) -> Result<ExitCode> {
    cfg.persist("evaluate")?;
    let catalog = cfg.catalog()?;
    let scorer = Scorer { cfg, vocab: TaskVocabulary::for_catalog(&catalog) };
    let logs = if logs.is_empty() { vec![log_path(cfg)] } else { logs };
    let cmp = match &comparator {
        Some(p) => Some((stem(p), predictions(p, &catalog)?)),
        None => None,
    };
    let mut rows = Vec::new();
    for log in &logs {
        let preds = predictions(log, &catalog)?;
        let row = scorer.row(stem(log), &preds, cmp.as_ref().map(|(n, p)| (n.as_str(), p.as_slice())))?;
        print_row(&row);
        rows.push(row);
    }
    let path = cfg.out.join("evaluation.csv");
    write_table(&rows, TableLayout::PerTask, &path)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn build_sft(cfg: &RunConfig) -> Result<ExitCode> {
    cfg.persist("build-sft")?;
    let catalog = cfg.catalog()?;
    let template = cfg.template()?;
    let recipe = cfg.recipe(&catalog)?;
    let queries = select_query_set(&catalog, &recipe)?;
    let dir = cfg.out.join("sft");
    let label = cfg.selection_strategy(&recipe.strategy)?.label();
    for (assignments, ds) in sweep_k(&catalog, &recipe, &queries, &cfg.sft.k_values, &template, Execution::Parallel)? {
        let stem = format!("{}.{label}.k{}", recipe.task, ds.k);
        ds.write(&dir, &stem)?;
        write_assignments(&dir.join(format!("{stem}.assign")), &assignments)?;
        println!(
            "{stem}: {} tuples in {} groups, {} excluded, {} optimizer updates",
            ds.tuples.len(),
            ds.schedule.groups,
            ds.excluded.len(),
            ds.schedule.planned_optimizer_updates
        );
    }
    if cfg.sft.single_baseline {
        let negatives = select_negative_subset(&catalog, recipe.baseline, recipe.n_negative, recipe.seed, Execution::Parallel)?;
        let ds = build_single_dataset(&catalog, &recipe, &queries, &negatives, &template)?;
        let stem = format!("{}.single.{}", recipe.task, recipe.baseline);
        ds.write(&dir, &stem)?;
        write_subset(&dir.join(format!("{stem}.subset")), &negatives)?;
        println!("{stem}: {} tuples, {} optimizer updates", ds.tuples.len(), ds.schedule.planned_optimizer_updates);
    }
    Ok(ExitCode::SUCCESS)
}

fn attribute(cfg: &RunConfig, queries: &[String], assignments: Option<PathBuf>) -> Result<ExitCode> {
    cfg.persist("attribute")?;
    let catalog = cfg.catalog()?;
    let template = cfg.template()?;
    let vocab = TaskVocabulary::for_catalog(&catalog);
    let assigned = load_or_select(cfg, &catalog, queries, assignments)?;
    let backend = build_backend(&cfg.backend)?;
    let dir = cfg.out.join("heatmaps");
    fs::create_dir_all(&dir)?;
    for q in queries {
        let record = catalog.get(q).with_context(|| format!("unknown query {q:?}"))?;
        let bundle = match cfg.mode {
            RunMode::Single => build_single(record, &template, &vocab.candidates)?,
            _ => {
                let a = assigned.iter().find(|a| &a.query_id == q).with_context(|| format!("no assignment for {q:?}"))?;
                build_comparative(a, &catalog, &template, &vocab.candidates, false)?.remove(0)
            }
        };
        let gold = vocab.answer_for_label(&record.label).with_context(|| format!("label {:?} has no answer", record.label))?;
        let map = occlusion_map(&bundle, backend.as_ref(), &cfg.attribution, gold, exec_for(cfg))?;
        let stem = dir.join(format!("{q}.{}", cfg.mode));
        write_matrix_csv(&map, &stem.with_extension(format!("{}.csv", cfg.mode)))?;
        write_layer(&map, &stem.with_extension(format!("{}.layer.png", cfg.mode)))?;
        let image = sip_core::imaging::load(Path::new(&record.uri))?;
        write_overlay(&map, &image, &stem.with_extension(format!("{}.overlay.png", cfg.mode)))?;
        fs::write(stem.with_extension(format!("{}.json", cfg.mode)), serde_json::to_string(&map)?)?;
        println!("{q}: {}x{} map, target {:?}, {} backend calls", map.rows, map.cols, map.target, map.backend_calls);
    }
    Ok(ExitCode::SUCCESS)
}

fn compare_strategies(cfg: &RunConfig) -> Result<ExitCode> {
    cfg.persist("compare-strategies")?;
    let catalog = cfg.catalog()?;
    let queries = cfg.query_ids(&catalog);
    let backend = build_backend(&cfg.backend)?;
    let mode = if cfg.mode == RunMode::Single { RunMode::Comparative } else { cfg.mode };
    let dir = cfg.out.join("strategies");
    fs::create_dir_all(&dir)?;
    let mut runs = Vec::new();
    let mut clean = true;
    for label in &cfg.strategies {
        let strategy = cfg.selection_strategy(label)?;
        let key = strategy.label();
        let assignments = select_references_with(&catalog, &queries, &strategy, Execution::Parallel)?;
        write_assignments(&dir.join(format!("{key}.assign")), &assignments)?;
        let log = dir.join(format!("{key}.log"));
        let summary = execute(cfg, &catalog, queries.clone(), &assignments, mode, log.clone(), backend.as_ref())?;
        report_run(&summary);
        clean &= summary.is_clean();
        runs.push((key, predictions(&log, &catalog)?));
    }
    let scorer = Scorer { cfg, vocab: TaskVocabulary::for_catalog(&catalog) };
    let baseline = runs.iter().find(|(k, _)| k == "RS").map(|(_, p)| p.clone());
    let mut rows = Vec::new();
    for (key, preds) in &runs {
        let mut row = scorer.row(key.clone(), preds, None)?;
        if key != "RS" {
            if let Some(b) = &baseline {
                row.agreement = Some(agreement(preds, b)?);
            }
        }
        print_row(&row);
        rows.push(row);
    }
    let path = cfg.out.join("strategies.csv");
    write_table(&rows, TableLayout::PerStrategy, &path)?;
    println!("wrote {}", path.display());
    Ok(if clean { ExitCode::SUCCESS } else { ExitCode::from(EXIT_QUARANTINE) })
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    fs::write(&path, toml::to_string(cfg)?)?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn fixture(kind: FixtureKind, out: &Path, seed: u64, pairs: usize) -> Result<ExitCode> {
    fs::create_dir_all(out)?;
    let out = &fs::canonicalize(out)?;
    let images = out.join("images");
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    let catalog = match kind {
        FixtureKind::Table3 => {
            for p in synth::write_table3_fixtures(out, seed)? {
                println!("wrote {}", p.display());
            }
            return Ok(ExitCode::SUCCESS);
        }
        FixtureKind::Nuisance => {
            cfg.strategy.label = "[scanner]".into();
            cfg.backend = sip_core::inference::BackendDescriptor::mock(BackendKind::MockNuisance).with_param("comparative_bias", 0.05);
            synth::nuisance_dataset(&images, pairs, seed)?
        }
        FixtureKind::Strategy => {
            cfg.strategy.reference_center = Some("B".into());
            cfg.backend = sip_core::inference::BackendDescriptor::mock(BackendKind::MockNuisance);
            synth::strategy_fixture(&images, 100, 200, true, seed)?
        }
        FixtureKind::Protocol => synth::protocol_fixture(&images, seed)?,
        FixtureKind::Planted => {
            let rect = (104, 104, 168, 168);
            fs::create_dir_all(&images)?;
            let q = images.join("planted.png");
            let r = images.join("control.png");
            sip_core::attribution::planted_image((336, 336), rect, 40, 220).save(&q)?;
            sip_core::attribution::planted_image((336, 336), (0, 0, 0, 0), 40, 40).save(&r)?;
            cfg.mode = RunMode::Single;
            cfg.backend = sip_core::inference::BackendDescriptor::mock(BackendKind::MockPlanted)
                .with_param("rect_x0", rect.0 as f64)
                .with_param("rect_y0", rect.1 as f64)
                .with_param("rect_x1", rect.2 as f64)
                .with_param("rect_y1", rect.3 as f64);
            planted_catalog(&q, &r)?
        }
    };
    let manifest = out.join(format!("{}.manifest", catalog.task.to_ascii_lowercase()));
    let mut catalog = catalog;
    if catalog.embeddings().is_some() {
        catalog.embeddings_path = Some("embeddings.tsv".into());
    }
    catalog.write_manifest(&manifest)?;
    println!("wrote {} ({} records)", manifest.display(), catalog.len());
    cfg.task = Some(catalog.task.clone());
    cfg.manifests = vec![PathBuf::from(manifest.file_name().expect("file name"))];
    write_config(out, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn planted_catalog(query: &Path, reference: &Path) -> Result<Catalog> {
    let record = |id: &str, path: &Path, label: &str, split| sip_core::ImageRecord {
        id: id.into(),
        uri: path.display().to_string(),
        label: label.into(),
        attributes: Default::default(),
        center: "A".into(),
        split,
        embedding_ref: None,
    };
    Ok(Catalog::new(
        "Planted",
        vec!["Normal".into()],
        vec!["Planted".into()],
        vec![record("planted", query, "Planted", Split::Test), record("control", reference, "Normal", Split::Train)],
        None,
    )?)
}
