//! Balanced accuracy, F1, Cohen's kappa, agreement and bootstrap summaries.
//!
//! Counting is done in exact rationals and converted to `f64` only on output.
//! Abstentions are wrong for every class's recall and never count as a
//! predicted positive.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, Execution};
use crate::hash::stream_rng;
use crate::inference::LogRecord;
use crate::prompting::{CandidateAnswerSet, TaskVocabulary};
use crate::Catalog;

type Q = Ratio<i128>;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions")]
    Empty,
    #[error("gold label {0:?} is not in the task vocabulary")]
    UnknownGold(String),
    #[error("prediction {0:?} is not a candidate answer")]
    UnknownPrediction(String),
    #[error("query {0:?} is missing from one of the runs")]
    Misaligned(String),
    #[error("query {0:?} appears more than once")]
    DuplicateQuery(String),
    #[error("at least 100 bootstrap replicates are required, got {0}")]
    TooFewReplicates(usize),
    #[error("report {0:?} has n = 0")]
    EmptyReport(String),
    #[error("query {0:?} is not in the catalog")]
    UnknownQuery(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub query_id: String,
    pub gold: String,
    /// `None` is an abstention.
    pub predicted: Option<String>,
}

/// Joins logged decisions with gold answers from the catalog.
pub fn labeled_predictions(records: &[LogRecord], catalog: &Catalog) -> Result<Vec<LabeledPrediction>, MetricsError> {
    let vocab = TaskVocabulary::for_catalog(catalog);
    records
        .iter()
        .map(|r| {
            let rec = catalog.get(r.query_id()).ok_or_else(|| MetricsError::UnknownQuery(r.query_id().into()))?;
            let gold = vocab.answer_for_label(&rec.label).ok_or_else(|| MetricsError::UnknownGold(rec.label.clone()))?;
            Ok(LabeledPrediction { query_id: r.query_id().into(), gold: gold.into(), predicted: r.answer().map(String::from) })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Kind {
    PositiveClass,
    Macro,
}

/// Rows are gold classes, columns predicted classes in candidate order with
/// a final abstention column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    fn empty(labels: &[String]) -> Self {
        Self { labels: labels.to_vec(), counts: vec![vec![0; labels.len() + 1]; labels.len()] }
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn abstentions(&self) -> u64 {
        self.counts.iter().map(|r| r[self.labels.len()]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub bacc: f64,
    pub f1: f64,
    pub f1_kind: F1Kind,
    /// Classes with gold support only.
    pub per_class_recall: BTreeMap<String, f64>,
    pub confusion: Confusion,
    pub abstentions: usize,
}

fn q(num: u64, den: u64) -> Q {
    Q::new(num as i128, den as i128)
}

fn to_f64(r: Q) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

struct Exact {
    bacc: Q,
    f1: Q,
    recall: Vec<Option<Q>>,
}

fn exact_scores(c: &Confusion, positive: Option<usize>) -> Exact {
    let k = c.labels.len();
    let recall: Vec<Option<Q>> = (0..k).map(|i| (c.support(i) > 0).then(|| q(c.counts[i][i], c.support(i)))).collect();
    let present: Vec<Q> = recall.iter().flatten().copied().collect();
    let bacc = if present.is_empty() {
        Q::from_integer(0)
    } else {
        present.iter().fold(Q::from_integer(0), |a, &b| a + b) / Q::from_integer(present.len() as i128)
    };
    let f1_of = |i: usize| -> Option<Q> {
        let tp = c.counts[i][i];
        let fp: u64 = (0..k).filter(|&g| g != i).map(|g| c.counts[g][i]).sum();
        let fn_ = c.support(i) - tp;
        let den = 2 * tp + fp + fn_;
        (den > 0).then(|| q(2 * tp, den))
    };
    let f1 = match positive {
        Some(p) => f1_of(p).unwrap_or_else(|| Q::from_integer(0)),
        None => {
            let all: Vec<Q> = (0..k).filter_map(f1_of).collect();
            if all.is_empty() {
                Q::from_integer(0)
            } else {
                all.iter().fold(Q::from_integer(0), |a, &b| a + b) / Q::from_integer(all.len() as i128)
            }
        }
    };
    Exact { bacc, f1, recall }
}

/// Encodes predictions as (gold index, predicted index or `k` for abstain).
fn encode(preds: &[LabeledPrediction], candidates: &CandidateAnswerSet) -> Result<Vec<(usize, usize)>, MetricsError> {
    let k = candidates.len();
    preds
        .iter()
        .map(|p| {
            let g = candidates.position(&p.gold).ok_or_else(|| MetricsError::UnknownGold(p.gold.clone()))?;
            let c = match &p.predicted {
                None => k,
                Some(a) => candidates.position(a).ok_or_else(|| MetricsError::UnknownPrediction(a.clone()))?,
            };
            Ok((g, c))
        })
        .collect()
}

fn confusion_of<'a>(labels: &[String], pairs: impl IntoIterator<Item = &'a (usize, usize)>) -> Confusion {
    let mut c = Confusion::empty(labels);
    for &(g, p) in pairs {
        c.counts[g][p] += 1;
    }
    c
}

fn positive_index(candidates: &CandidateAnswerSet, positive: Option<&str>) -> Result<Option<usize>, MetricsError> {
    positive
        .map(|p| candidates.position(p).ok_or_else(|| MetricsError::UnknownPrediction(p.into())))
        .transpose()
}

/// `positive` selects positive-class F1 (binary tasks); `None` gives macro-F1
/// over the classes present in gold or predictions.
pub fn compute_metrics(
    preds: &[LabeledPrediction],
    candidates: &CandidateAnswerSet,
    positive: Option<&str>,
) -> Result<MetricReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pos = positive_index(candidates, positive)?;
    let pairs = encode(preds, candidates)?;
    let confusion = confusion_of(candidates.answers(), &pairs);
    let exact = exact_scores(&confusion, pos);
    let per_class_recall = candidates
        .answers()
        .iter()
        .zip(&exact.recall)
        .filter_map(|(a, r)| r.map(|r| (a.clone(), to_f64(r))))
        .collect();
    Ok(MetricReport {
        n: preds.len(),
        bacc: to_f64(exact.bacc),
        f1: to_f64(exact.f1),
        f1_kind: if pos.is_some() { F1Kind::PositiveClass } else { F1Kind::Macro },
        per_class_recall,
        abstentions: confusion.abstentions() as usize,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    /// In [-1, 1].
    pub kappa: f64,
    /// `100 * kappa`, the scale tables report.
    pub kappa_pct: f64,
    pub agreement_pct: f64,
}

fn align<'a>(a: &'a [LabeledPrediction], b: &'a [LabeledPrediction]) -> Result<Vec<(&'a LabeledPrediction, &'a LabeledPrediction)>, MetricsError> {
    let mut index = HashMap::with_capacity(b.len());
    for p in b {
        if index.insert(p.query_id.as_str(), p).is_some() {
            return Err(MetricsError::DuplicateQuery(p.query_id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let pairs = a
        .iter()
        .map(|p| {
            if !seen.insert(p.query_id.as_str()) {
                return Err(MetricsError::DuplicateQuery(p.query_id.clone()));
            }
            index.get(p.query_id.as_str()).map(|o| (p, *o)).ok_or_else(|| MetricsError::Misaligned(p.query_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = b.iter().find(|p| !seen.contains(p.query_id.as_str())) {
        return Err(MetricsError::Misaligned(extra.query_id.clone()));
    }
    Ok(pairs)
}

/// Cohen's kappa and raw agreement between two runs, aligned by query id.
/// Abstention is its own category. When chance agreement is 1 the runs are
/// constant and equal, and kappa is 1.
pub fn agreement(a: &[LabeledPrediction], b: &[LabeledPrediction]) -> Result<AgreementReport, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pairs = align(a, b)?;
    let n = pairs.len() as u64;
    let mut ma: BTreeMap<Option<&str>, u64> = BTreeMap::new();
    let mut mb: BTreeMap<Option<&str>, u64> = BTreeMap::new();
    let mut same = 0u64;
    for (x, y) in &pairs {
        *ma.entry(x.predicted.as_deref()).or_default() += 1;
        *mb.entry(y.predicted.as_deref()).or_default() += 1;
        same += u64::from(x.predicted == y.predicted);
    }
    let p_o = q(same, n);
    let p_e = ma.iter().map(|(c, &na)| q(na * mb.get(c).copied().unwrap_or(0), n * n)).fold(Q::from_integer(0), |s, v| s + v);
    let one = Q::from_integer(1);
    let kappa = if p_e == one {
        if p_o == one { one } else { Q::from_integer(0) }
    } else {
        (p_o - p_e) / (one - p_e)
    };
    let kappa = to_f64(kappa);
    Ok(AgreementReport { n: pairs.len(), kappa, kappa_pct: 100.0 * kappa, agreement_pct: 100.0 * to_f64(p_o) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Bacc,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub comparator: String,
    pub comparator_point: f64,
    /// Mean of (subject - comparator) over replicates.
    pub mean_difference: f64,
    pub max_abs_difference: f64,
    /// Fraction of replicates where the comparator scores at least the subject.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub replicates: usize,
    pub metric: MetricKind,
    pub seed: u64,
    pub point_estimate: f64,
    pub mean: f64,
    /// Sample standard deviation (divisor B - 1).
    pub std: f64,
    pub paired: Option<PairedTest>,
}

pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { replicates: 1000, seed: 0, exec: Execution::Parallel }
    }
}

fn pick(e: &Exact, metric: MetricKind) -> f64 {
    to_f64(match metric {
        MetricKind::Bacc => e.bacc,
        MetricKind::F1 => e.f1,
    })
}

/// Nonparametric bootstrap over query indices. With a comparator the same
/// index draw is applied to both runs (paired resampling). Replicate `r` uses
/// its own random stream, so the result does not depend on `exec`.
pub fn bootstrap(
    preds: &[LabeledPrediction],
    candidates: &CandidateAnswerSet,
    positive: Option<&str>,
    metric: MetricKind,
    config: &BootstrapConfig,
    comparator: Option<(&str, &[LabeledPrediction])>,
) -> Result<BootstrapReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if config.replicates < 100 {
        return Err(MetricsError::TooFewReplicates(config.replicates));
    }
    let pos = positive_index(candidates, positive)?;
    let labels = candidates.answers();
    let subject = encode(preds, candidates)?;
    let other = match comparator {
        Some((_, cmp)) => {
            let aligned: Vec<LabeledPrediction> = align(preds, cmp)?.into_iter().map(|(_, o)| o.clone()).collect();
            Some(encode(&aligned, candidates)?)
        }
        None => None,
    };
    let n = subject.len();
    let point = pick(&exact_scores(&confusion_of(labels, &subject), pos), metric);
    let replicates = map_indexed(config.replicates, config.exec, |r| {
        let mut rng = stream_rng(config.seed, r as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let s = pick(&exact_scores(&confusion_of(labels, idx.iter().map(|&i| &subject[i])), pos), metric);
        let c = other.as_ref().map(|o| pick(&exact_scores(&confusion_of(labels, idx.iter().map(|&i| &o[i])), pos), metric));
        (s, c)
    });
    let b = replicates.len() as f64;
    let mean = replicates.iter().map(|r| r.0).sum::<f64>() / b;
    let var = replicates.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (b - 1.0);
    let paired = match (comparator, &other) {
        (Some((name, _)), Some(o)) => {
            let diffs: Vec<f64> = replicates.iter().map(|(s, c)| s - c.expect("paired")).collect();
            let ge = replicates.iter().filter(|(s, c)| c.expect("paired") >= *s).count();
            Some(PairedTest {
                comparator: name.to_string(),
                comparator_point: pick(&exact_scores(&confusion_of(labels, o), pos), metric),
                mean_difference: diffs.iter().sum::<f64>() / b,
                max_abs_difference: diffs.iter().fold(0.0, |m, d| m.max(d.abs())),
                p_value: ge as f64 / b,
            })
        }
        _ => None,
    };
    Ok(BootstrapReport { replicates: config.replicates, metric, seed: config.seed, point_estimate: point, mean, std: var.sqrt(), paired })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableLayout {
    PerTask,
    PerStrategy,
}

/// One table row: a task (per-task layout) or a strategy (per-strategy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: String,
    pub report: MetricReport,
    pub bacc_bootstrap: Option<BootstrapReport>,
    pub f1_bootstrap: Option<BootstrapReport>,
    /// Agreement with the baseline run; absent for the baseline itself.
    pub agreement: Option<AgreementReport>,
}

const PER_TASK: [&str; 10] =
    ["task", "n", "bacc", "bacc_mean", "bacc_std", "bacc_display", "f1", "f1_mean", "f1_std", "f1_display"];
const PER_STRATEGY_EXTRA: [&str; 4] = ["kappa", "kappa_x100", "agree", "f1_kind"];

fn display(point: f64, boot: &Option<BootstrapReport>) -> String {
    match boot {
        Some(b) => format!("{:.2} ± {:.2}", 100.0 * b.mean, 100.0 * b.std),
        None => format!("{:.2}", 100.0 * point),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the CSV table and a `<path>.jsonl` sidecar holding every row.
/// Numbers are printed in shortest round-trip form; `*_display` columns are
/// percentage strings in `mean ± std` form.
pub fn write_table(rows: &[SummaryRow], layout: TableLayout, path: &Path) -> Result<PathBuf, MetricsError> {
    if let Some(r) = rows.iter().find(|r| r.report.n == 0) {
        return Err(MetricsError::EmptyReport(r.key.clone()));
    }
    let mut header: Vec<&str> = PER_TASK.to_vec();
    if layout == TableLayout::PerStrategy {
        header[0] = "strategy";
        header.extend(PER_STRATEGY_EXTRA);
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    let mut sidecar = String::new();
    for r in rows {
        let mut rec = vec![
            r.key.clone(),
            r.report.n.to_string(),
            r.report.bacc.to_string(),
            opt(r.bacc_bootstrap.as_ref().map(|b| b.mean)),
            opt(r.bacc_bootstrap.as_ref().map(|b| b.std)),
            display(r.report.bacc, &r.bacc_bootstrap),
            r.report.f1.to_string(),
            opt(r.f1_bootstrap.as_ref().map(|b| b.mean)),
            opt(r.f1_bootstrap.as_ref().map(|b| b.std)),
            display(r.report.f1, &r.f1_bootstrap),
        ];
        if layout == TableLayout::PerStrategy {
            rec.push(opt(r.agreement.as_ref().map(|a| a.kappa)));
            rec.push(opt(r.agreement.as_ref().map(|a| a.kappa_pct)));
            rec.push(opt(r.agreement.as_ref().map(|a| a.agreement_pct)));
            rec.push(serde_json::to_value(r.report.f1_kind).expect("enum").as_str().unwrap_or_default().to_string());
        }
        w.write_record(&rec)?;
        sidecar.push_str(&serde_json::to_string(r).expect("row serializes"));
        sidecar.push('\n');
    }
    w.flush()?;
    let mut side = path.as_os_str().to_owned();
    side.push(".jsonl");
    let side = PathBuf::from(side);
    fs::write(&side, sidecar)?;
    Ok(side)
}
