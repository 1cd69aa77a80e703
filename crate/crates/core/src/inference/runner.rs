//! Resumable experiment runs over a query set.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::log::{DecisionLog, LogRecord, Provenance};
use super::{bag, score, Backend, Decision, InferenceError};
use crate::catalog::Catalog;
use crate::exec::{map_slice, Execution};
use crate::hash::RNG_ID;
use crate::prompting::{build_comparative, build_single, CandidateAnswerSet, PromptTemplate};
use crate::selection::ReferenceAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Single,
    /// One bundle carrying every assigned reference.
    Comparative,
    /// One two-image bundle per reference, majority vote.
    Bagging,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Single => "single",
            RunMode::Comparative => "comparative",
            RunMode::Bagging => "bagging",
        })
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(RunMode::Single),
            "comparative" => Ok(RunMode::Comparative),
            "bagging" | "comparative+bagging" => Ok(RunMode::Bagging),
            other => Err(format!("unknown mode {other:?} (single, comparative, bagging)")),
        }
    }
}

pub struct ExperimentPlan<'a> {
    pub catalog: &'a Catalog,
    /// Queries in log order.
    pub query_ids: Vec<String>,
    /// Required for every query in comparative modes; ignored in single mode.
    pub assignments: &'a [ReferenceAssignment],
    pub template: &'a PromptTemplate,
    pub candidates: CandidateAnswerSet,
    pub mode: RunMode,
    pub seed: u64,
    pub log_path: PathBuf,
    /// Creation time for a new log; defaults to `SOURCE_DATE_EPOCH`, then now.
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub log_path: PathBuf,
    pub logged: usize,
    /// Already present from an earlier run.
    pub skipped: usize,
    pub quarantined: Vec<QuarantineEntry>,
    pub score_calls: usize,
}

impl RunSummary {
    pub fn is_clean(&self) -> bool {
        self.quarantined.is_empty()
    }
}

/// Failed queries of the latest run, one JSON object per line.
pub fn quarantine_path(log_path: &Path) -> PathBuf {
    let mut name = log_path.as_os_str().to_owned();
    name.push(".quarantine");
    PathBuf::from(name)
}

fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// Scores every query not yet in the log and appends the results.
///
/// Queries are processed in chunks of `4 * max_parallel` with at most
/// `max_parallel` in flight; each chunk is written in query order, so an
/// interrupted and resumed run produces the same bytes as an uninterrupted
/// one. A failing query is quarantined and the run continues.
pub fn run_experiment(plan: &ExperimentPlan<'_>, backend: &dyn Backend) -> Result<RunSummary, InferenceError> {
    let desc = backend.descriptor();
    desc.validate()?;
    let by_query: BTreeMap<&str, &ReferenceAssignment> = plan.assignments.iter().map(|a| (a.query_id.as_str(), a)).collect();
    for q in &plan.query_ids {
        if plan.catalog.get(q).is_none() {
            return Err(InferenceError::Config(format!("query {q:?} is not in the catalog")));
        }
        if plan.mode != RunMode::Single && !by_query.contains_key(q.as_str()) {
            return Err(InferenceError::Config(format!("no reference assignment for query {q:?}")));
        }
    }
    let strategy = match plan.mode {
        RunMode::Single => None,
        _ => {
            let first = plan.assignments.first().map(|a| a.strategy.clone());
            if plan.assignments.iter().any(|a| Some(&a.strategy) != first.as_ref()) {
                return Err(InferenceError::Config("assignments mix strategies".into()));
            }
            first
        }
    };
    let provenance = Provenance {
        strategy,
        seed: plan.seed,
        template_id: plan.template.template_id.clone(),
        backend: desc.clone(),
        mode: plan.mode,
        rng: RNG_ID.into(),
        timestamp: plan.timestamp.unwrap_or_else(creation_time),
    };
    let mut log = DecisionLog::open(&plan.log_path, provenance)?;
    let pending: Vec<&String> = plan.query_ids.iter().filter(|q| !log.is_done(q)).collect();
    let skipped = plan.query_ids.len() - pending.len();

    let run_one = |q: &&String| -> (Result<LogRecord, InferenceError>, usize) {
        let mut calls = 0;
        let result = (|| {
            let record = plan.catalog.get(q).expect("checked above");
            match plan.mode {
                RunMode::Single => {
                    let bundle = build_single(record, plan.template, &plan.candidates)?;
                    calls += 1;
                    Ok(LogRecord::Decision(Decision::new(q.as_str(), &bundle, score(&bundle, backend)?)?))
                }
                RunMode::Comparative => {
                    let bundles = build_comparative(by_query[q.as_str()], plan.catalog, plan.template, &plan.candidates, false)?;
                    calls += 1;
                    Ok(LogRecord::Decision(Decision::new(q.as_str(), &bundles[0], score(&bundles[0], backend)?)?))
                }
                RunMode::Bagging => {
                    let bundles = build_comparative(by_query[q.as_str()], plan.catalog, plan.template, &plan.candidates, true)?;
                    let mut members = Vec::with_capacity(bundles.len());
                    for b in &bundles {
                        calls += 1;
                        members.push(Decision::new(q.as_str(), b, score(b, backend)?)?);
                    }
                    Ok(LogRecord::Bagged(bag(members, &plan.candidates)?))
                }
            }
        })();
        (result, calls)
    };

    let exec = Execution::Bounded(desc.max_parallel);
    let mut summary = RunSummary { log_path: plan.log_path.clone(), logged: 0, skipped, quarantined: Vec::new(), score_calls: 0 };
    for chunk in pending.chunks(4 * desc.max_parallel) {
        for (q, (result, calls)) in chunk.iter().zip(map_slice(chunk, exec, run_one)) {
            summary.score_calls += calls;
            match result {
                Ok(rec) => {
                    log.append(&rec)?;
                    summary.logged += 1;
                }
                Err(e) => summary.quarantined.push(QuarantineEntry { query_id: q.to_string(), error: e.to_string() }),
            }
        }
    }

    let qpath = quarantine_path(&plan.log_path);
    if summary.quarantined.is_empty() {
        if qpath.exists() {
            fs::remove_file(&qpath)?;
        }
    } else {
        let body: String = summary
            .quarantined
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect();
        fs::write(&qpath, body)?;
    }
    Ok(summary)
}
