//! Fine-tuning tuples and fixed-budget training schedules.
//!
//! Comparative tuples are per pair: one query, one healthy-control reference.
//! The K tuples of a query form a group whose gradients the trainer averages
//! into one step, so the accumulation window of a K-reference dataset holds
//! `base_accumulation` whole groups and the number of optimizer updates does
//! not depend on K. Single-image baselines spread their (query + negative)
//! tuples evenly over the same number of updates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, PoolFilter, Split};
use crate::exec::Execution;
use crate::hash::{item_rng, rng_from_seed};
use crate::prompting::{PromptError, PromptTemplate, TaskVocabulary};
use crate::selection::{select_references_with, NegativeSubset, ReferenceAssignment, SelectionError, SelectionStrategy, SubsetMethod};

pub const SFT_MAGIC: &str = "#sip-sft v1";

#[derive(Debug, Error)]
pub enum SftError {
    #[error("expected {expected} queries, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("assignment for {query:?} uses {found}, recipe expects {expected}")]
    StrategyMismatch { query: String, expected: String, found: String },
    #[error("query {0:?} is not in the catalog")]
    UnknownQuery(String),
    #[error("reference {0:?} is not a negative train record")]
    BadReference(String),
    #[error("label {0:?} has no answer in the task vocabulary")]
    UnmappedLabel(String),
    #[error("need {needed} train images labelled {label:?}, found {available}")]
    NotEnoughQueries { label: String, needed: usize, available: usize },
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftMode {
    Single,
    Comparative,
}

impl SftMode {
    fn as_str(self) -> &'static str {
        match self {
            SftMode::Single => "single",
            SftMode::Comparative => "comparative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTuple {
    pub group_id: String,
    pub k_index: usize,
    pub mode: SftMode,
    pub query_id: String,
    pub query_uri: String,
    /// Exactly one entry for comparative tuples, none for single ones.
    pub reference_ids: Vec<String>,
    pub reference_uris: Vec<String>,
    pub instruction: String,
    /// Gold answer in the task vocabulary.
    pub answer: String,
    /// Raw catalog label of the query.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub base_accumulation: usize,
    pub k: usize,
    /// Tuples accumulated per optimizer step (largest window for single mode).
    pub effective_accumulation: usize,
    pub planned_optimizer_updates: usize,
    pub epochs: usize,
    pub tuples: usize,
    pub groups: usize,
    /// Tuple index at which each accumulation window of an epoch starts.
    pub windows: Vec<usize>,
}

impl TrainingSchedule {
    /// Every window boundary falls between groups.
    pub fn is_group_atomic(&self, tuples: &[SftTuple]) -> bool {
        self.windows.iter().all(|&w| w == 0 || w >= tuples.len() || tuples[w - 1].group_id != tuples[w].group_id)
    }

    pub fn to_text(&self) -> String {
        let windows: Vec<String> = self.windows.iter().map(usize::to_string).collect();
        format!(
            "base_accumulation={}\nk={}\neffective_accumulation={}\nplanned_optimizer_updates={}\ngrouping=atomic\nepochs={}\ntuples={}\ngroups={}\nwindows={}\n",
            self.base_accumulation,
            self.k,
            self.effective_accumulation,
            self.planned_optimizer_updates,
            self.epochs,
            self.tuples,
            self.groups,
            windows.join(","),
        )
    }

    pub fn parse(text: &str) -> Result<Self, SftError> {
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim(), v.trim())).collect();
        let num = |k: &str| -> Result<usize, SftError> {
            kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| SftError::Recipe(format!("schedule lacks {k}")))
        };
        if kv.get("grouping") != Some(&"atomic") {
            return Err(SftError::Recipe("schedule grouping must be atomic".into()));
        }
        let windows = match kv.get("windows") {
            Some(v) if !v.is_empty() => v.split(',').map(|w| w.parse().map_err(|_| SftError::Recipe(format!("bad window {w:?}")))).collect::<Result<_, _>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            base_accumulation: num("base_accumulation")?,
            k: num("k")?,
            effective_accumulation: num("effective_accumulation")?,
            planned_optimizer_updates: num("planned_optimizer_updates")?,
            epochs: num("epochs")?,
            tuples: num("tuples")?,
            groups: num("groups")?,
            windows,
        })
    }
}

/// Hyperparameters passed through untouched to the external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerMetadata {
    pub adapter: String,
    pub lora_rank: u32,
    pub learning_rate: f64,
    pub per_device_batch: u32,
}

impl Default for TrainerMetadata {
    fn default() -> Self {
        Self { adapter: "lora".into(), lora_rank: 16, learning_rate: 1e-4, per_device_batch: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecipe {
    pub task: String,
    /// Query images drawn per positive (disease) class.
    pub queries_per_class: usize,
    /// Size of the single-image baselines' negative subset.
    pub n_negative: usize,
    pub k: usize,
    /// Strategy label (RS, SVP, EB, CC, ...).
    pub strategy: String,
    #[serde(default)]
    pub reference_center: Option<String>,
    pub baseline: SubsetMethod,
    pub seed: u64,
    pub base_accumulation: usize,
    pub epochs: usize,
    #[serde(default)]
    pub trainer: TrainerMetadata,
}

pub const BINARY_TASKS: [&str; 5] = ["Edema", "Pneumonia", "Glaucoma", "Melanoma", "Retinopathy"];

impl ExperimentRecipe {
    /// Published protocol counts: 500 queries and 500 baseline negatives for
    /// binary tasks; 411 queries per disease class and 211 negatives for DermaTri.
    pub fn bundled(task: &str) -> Option<Self> {
        let (per_class, negatives) = match task {
            "DermaTri" => (411, 211),
            t if BINARY_TASKS.contains(&t) => (500, 500),
            _ => return None,
        };
        Some(Self {
            task: task.into(),
            queries_per_class: per_class,
            n_negative: negatives,
            k: 1,
            strategy: "RS".into(),
            reference_center: None,
            baseline: SubsetMethod::Rand,
            seed: 0,
            base_accumulation: 4,
            epochs: 1,
            trainer: TrainerMetadata::default(),
        })
    }

    pub fn selection_strategy(&self, k: usize) -> Result<SelectionStrategy, SftError> {
        Ok(SelectionStrategy::from_label(&self.strategy, k, self.seed, self.reference_center.as_deref())?)
    }

    pub fn validate(&self) -> Result<(), SftError> {
        if self.k == 0 || self.base_accumulation == 0 || self.epochs == 0 || self.queries_per_class == 0 {
            return Err(SftError::Recipe("k, base_accumulation, epochs and queries_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Shared query set: `queries_per_class` train images of every positive label,
/// drawn with the recipe seed, in label then id order.
pub fn select_query_set(catalog: &Catalog, recipe: &ExperimentRecipe) -> Result<Vec<String>, SftError> {
    let mut out = Vec::new();
    for label in &catalog.positive_labels {
        let mut pool: Vec<&str> = catalog
            .records()
            .iter()
            .filter(|r| r.split == Split::Train && &r.label == label)
            .map(|r| r.id.as_str())
            .collect();
        pool.sort_unstable();
        if pool.len() < recipe.queries_per_class {
            return Err(SftError::NotEnoughQueries { label: label.clone(), needed: recipe.queries_per_class, available: pool.len() });
        }
        let mut rng = item_rng(recipe.seed, label);
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), recipe.queries_per_class).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i].to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftDataset {
    pub task: String,
    pub mode: SftMode,
    pub k: usize,
    pub template_id: String,
    pub seed: u64,
    pub tuples: Vec<SftTuple>,
    pub schedule: TrainingSchedule,
    /// Queries without tuples.
    pub excluded: Vec<ExclusionEntry>,
    /// Queries whose pool held fewer than k references, with achieved k.
    pub exhausted: Vec<(String, usize)>,
}

fn comparative_schedule(base: usize, k: usize, epochs: usize, group_sizes: &[usize]) -> TrainingSchedule {
    let mut windows = Vec::new();
    let mut start = 0;
    for chunk in group_sizes.chunks(base) {
        windows.push(start);
        start += chunk.iter().sum::<usize>();
    }
    TrainingSchedule {
        base_accumulation: base,
        k,
        effective_accumulation: base * k,
        planned_optimizer_updates: group_sizes.len().div_ceil(base) * epochs,
        epochs,
        tuples: start,
        groups: group_sizes.len(),
        windows,
    }
}

fn single_schedule(base: usize, epochs: usize, n_queries: usize, n_tuples: usize) -> TrainingSchedule {
    let updates = n_queries.div_ceil(base).max(1);
    let windows: Vec<usize> = (0..updates).map(|i| i * n_tuples / updates).collect();
    let widest = (0..updates).map(|i| (i + 1) * n_tuples / updates - i * n_tuples / updates).max().unwrap_or(0);
    TrainingSchedule {
        base_accumulation: base,
        k: 1,
        effective_accumulation: widest,
        planned_optimizer_updates: updates * epochs,
        epochs,
        tuples: n_tuples,
        groups: n_tuples,
        windows,
    }
}

fn gold_answer(vocab: &TaskVocabulary, label: &str) -> Result<String, SftError> {
    vocab.answer_for_label(label).map(String::from).ok_or_else(|| SftError::UnmappedLabel(label.into()))
}

/// Comparative dataset: one group of per-pair tuples per query, in query order.
pub fn build_sft_dataset(
    catalog: &Catalog,
    recipe: &ExperimentRecipe,
    query_ids: &[String],
    assignments: &[ReferenceAssignment],
    template: &PromptTemplate,
) -> Result<SftDataset, SftError> {
    recipe.validate()?;
    let expected = recipe.queries_per_class * catalog.positive_labels.len();
    if query_ids.len() != expected {
        return Err(SftError::CountMismatch { expected, actual: query_ids.len() });
    }
    let want = recipe.selection_strategy(recipe.k)?;
    let vocab = TaskVocabulary::for_catalog(catalog);
    let by_query: BTreeMap<&str, &ReferenceAssignment> = assignments.iter().map(|a| (a.query_id.as_str(), a)).collect();
    let instruction = template.render_comparative(&vocab.candidates, 1)?;
    let mut tuples = Vec::new();
    let mut group_sizes = Vec::new();
    let mut excluded = Vec::new();
    let mut exhausted = Vec::new();
    for q in query_ids {
        let query = catalog.get(q).ok_or_else(|| SftError::UnknownQuery(q.clone()))?;
        let Some(a) = by_query.get(q.as_str()) else {
            excluded.push(ExclusionEntry { query_id: q.clone(), reason: "no reference assignment".into() });
            continue;
        };
        if a.strategy.label() != want.label() || a.strategy.k != want.k {
            return Err(SftError::StrategyMismatch {
                query: q.clone(),
                expected: format!("{} k={}", want.label(), want.k),
                found: format!("{} k={}", a.strategy.label(), a.strategy.k),
            });
        }
        if a.reference_ids.is_empty() {
            excluded.push(ExclusionEntry { query_id: q.clone(), reason: "empty reference pool".into() });
            continue;
        }
        if a.pool_exhausted || a.achieved_k() < recipe.k {
            exhausted.push((q.clone(), a.achieved_k()));
        }
        let answer = gold_answer(&vocab, &query.label)?;
        for (k_index, rid) in a.reference_ids.iter().enumerate() {
            let r = catalog.get(rid).filter(|r| r.split == Split::Train && catalog.is_negative(rid) && rid != q);
            let r = r.ok_or_else(|| SftError::BadReference(rid.clone()))?;
            tuples.push(SftTuple {
                group_id: q.clone(),
                k_index,
                mode: SftMode::Comparative,
                query_id: q.clone(),
                query_uri: query.uri.clone(),
                reference_ids: vec![rid.clone()],
                reference_uris: vec![r.uri.clone()],
                instruction: instruction.clone(),
                answer: answer.clone(),
                label: query.label.clone(),
            });
        }
        group_sizes.push(a.reference_ids.len());
    }
    Ok(SftDataset {
        task: recipe.task.clone(),
        mode: SftMode::Comparative,
        k: recipe.k,
        template_id: template.template_id.clone(),
        seed: recipe.seed,
        schedule: comparative_schedule(recipe.base_accumulation, recipe.k, recipe.epochs, &group_sizes),
        tuples,
        excluded,
        exhausted,
    })
}

/// Single-image baseline: the queries plus the negative subset, shuffled with
/// the recipe seed and spread over the same number of updates as the
/// comparative datasets built on `query_ids`.
pub fn build_single_dataset(
    catalog: &Catalog,
    recipe: &ExperimentRecipe,
    query_ids: &[String],
    negatives: &NegativeSubset,
    template: &PromptTemplate,
) -> Result<SftDataset, SftError> {
    recipe.validate()?;
    let vocab = TaskVocabulary::for_catalog(catalog);
    let instruction = template.render_single(&vocab.candidates)?;
    let mut tuples = Vec::with_capacity(query_ids.len() + negatives.ids.len());
    for id in query_ids.iter().chain(&negatives.ids) {
        let r = catalog.get(id).ok_or_else(|| SftError::UnknownQuery(id.clone()))?;
        tuples.push(SftTuple {
            group_id: id.clone(),
            k_index: 0,
            mode: SftMode::Single,
            query_id: id.clone(),
            query_uri: r.uri.clone(),
            reference_ids: Vec::new(),
            reference_uris: Vec::new(),
            instruction: instruction.clone(),
            answer: gold_answer(&vocab, &r.label)?,
            label: r.label.clone(),
        });
    }
    tuples.shuffle(&mut rng_from_seed(recipe.seed));
    let schedule = single_schedule(recipe.base_accumulation, recipe.epochs, query_ids.len(), tuples.len());
    Ok(SftDataset {
        task: recipe.task.clone(),
        mode: SftMode::Single,
        k: 1,
        template_id: template.template_id.clone(),
        seed: recipe.seed,
        tuples,
        schedule,
        excluded: Vec::new(),
        exhausted: Vec::new(),
    })
}

/// One comparative dataset per k over the same query set.
pub fn sweep_k(
    catalog: &Catalog,
    recipe: &ExperimentRecipe,
    query_ids: &[String],
    k_values: &[usize],
    template: &PromptTemplate,
    exec: Execution,
) -> Result<Vec<(Vec<ReferenceAssignment>, SftDataset)>, SftError> {
    k_values
        .iter()
        .map(|&k| {
            if k == 0 {
                return Err(SftError::Recipe("k must be positive".into()));
            }
            let r = ExperimentRecipe { k, ..recipe.clone() };
            let assignments = select_references_with(catalog, query_ids, &r.selection_strategy(k)?, exec)?;
            let ds = build_sft_dataset(catalog, &r, query_ids, &assignments, template)?;
            Ok((assignments, ds))
        })
        .collect()
}

/// Number of negative train records, the pool the references come from.
pub fn negative_pool_size(catalog: &Catalog) -> usize {
    catalog.pool(&PoolFilter::healthy_train()).map(|p| p.len()).unwrap_or(0)
}

impl SftDataset {
    pub fn header(&self) -> String {
        format!("{SFT_MAGIC} task={} mode={} k={} template={} seed={}", self.task, self.mode.as_str(), self.k, self.template_id, self.seed)
    }

    pub fn tuple_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for t in &self.tuples {
            out.push_str(&serde_json::to_string(t).expect("tuple serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.tuples`, `<stem>.schedule` and `<stem>.manifest.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), SftError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.tuples")), self.tuple_text())?;
        fs::write(dir.join(format!("{stem}.schedule")), self.schedule.to_text())?;
        let mut manifest = String::new();
        let _ = writeln!(
            manifest,
            "{}",
            serde_json::json!({
                "tuples": self.tuples.len(),
                "groups": self.schedule.groups,
                "excluded": self.excluded,
                "exhausted": self.exhausted.iter().map(|(q, k)| serde_json::json!({"query_id": q, "achieved_k": k})).collect::<Vec<_>>(),
            })
        );
        fs::write(dir.join(format!("{stem}.manifest.json")), manifest)?;
        Ok(())
    }
}

/// Parses a tuple file back into header fields and tuples.
pub fn read_tuples(text: &str) -> Result<(BTreeMap<String, String>, Vec<SftTuple>), SftError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let rest = header.strip_prefix(SFT_MAGIC).ok_or_else(|| SftError::Recipe(format!("bad tuple header {header:?}")))?;
    let fields = rest.split_whitespace().filter_map(|kv| kv.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let tuples = lines
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SftError::Recipe(format!("bad tuple: {e}"))))
        .collect::<Result<_, _>>()?;
    Ok((fields, tuples))
}
