//! Reference selection for comparative inputs.
//!
//! Every reference comes from the healthy-control pool (negative partition,
//! train split) and never equals its query. Selection is seed-deterministic:
//! each query draws from its own stream `seed ^ hash(query_id)`, so results
//! do not depend on query order or on how queries are split across workers.

mod audit;
mod io;
mod subset;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, ImageRecord, PoolFilter};
use crate::exec::{self, Execution};
use crate::hash;

pub use audit::{audit, AuditSummary};
pub use io::{read_assignments, read_subset, write_assignments, write_subset, ASSIGN_MAGIC, SUBSET_MAGIC};
pub use subset::{farthest_point_order, kmeans, select_negative_subset, KMeansResult, NegativeSubset, SubsetMethod};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("unknown query id {0:?}")]
    UnknownQuery(String),
    #[error("empty reference pool for query {query:?} after {stage}")]
    EmptyPool { query: String, stage: String },
    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("catalog has no embedding table")]
    NoEmbeddings,
    #[error("pool has {available} negatives but {requested} were requested")]
    PoolTooSmall { available: usize, requested: usize },
    #[error("heterogeneous strategies")]
    HeterogeneousStrategies,
    #[error("no assignments")]
    NoAssignments,
    #[error("assignment file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Random,
    Demographic,
    Embedding,
    CrossCenter,
    Bagging,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Random => "random",
            StrategyKind::Demographic => "demographic",
            StrategyKind::Embedding => "embedding",
            StrategyKind::CrossCenter => "cross-center",
            StrategyKind::Bagging => "bagging",
        })
    }
}

/// Attribute names behind the S / V / P abbreviations.
pub const SEX: &str = "sex";
pub const VIEW: &str = "view";
pub const PROJECTION: &str = "projection";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    /// Demographic only. Relaxation drops names from the right.
    #[serde(default)]
    pub match_attributes: Vec<String>,
    /// CrossCenter only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_center: Option<String>,
    /// Fixed attribute values every reference must carry (e.g. `view=frontal`).
    /// Never relaxed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub value_filter: BTreeMap<String, String>,
    pub k: usize,
    pub seed: u64,
}

impl SelectionStrategy {
    fn base(kind: StrategyKind, k: usize, seed: u64) -> Self {
        Self { kind, match_attributes: Vec::new(), reference_center: None, value_filter: BTreeMap::new(), k, seed }
    }

    pub fn random(k: usize, seed: u64) -> Self {
        Self::base(StrategyKind::Random, k, seed)
    }

    pub fn bagging(k: usize, seed: u64) -> Self {
        Self::base(StrategyKind::Bagging, k, seed)
    }

    pub fn embedding(k: usize, seed: u64) -> Self {
        Self::base(StrategyKind::Embedding, k, seed)
    }

    pub fn demographic<S: Into<String>>(attributes: impl IntoIterator<Item = S>, k: usize, seed: u64) -> Self {
        Self { match_attributes: attributes.into_iter().map(Into::into).collect(), ..Self::base(StrategyKind::Demographic, k, seed) }
    }

    pub fn cross_center(center: impl Into<String>, k: usize, seed: u64) -> Self {
        Self { reference_center: Some(center.into()), ..Self::base(StrategyKind::CrossCenter, k, seed) }
    }

    pub fn with_value_filter(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.value_filter.insert(name.into(), value.into());
        self
    }

    /// Parses the matching-criterion abbreviations used in strategy tables:
    /// any non-empty combination of `S`, `V`, `P` (in that order) optionally
    /// followed by bracketed attribute names (`[scanner]`), `CC`, `EB`, `RS`,
    /// plus `BAG`.
    pub fn from_label(label: &str, k: usize, seed: u64, reference_center: Option<&str>) -> Result<Self, SelectionError> {
        let upper = label.to_ascii_uppercase();
        match upper.as_str() {
            "RS" => Ok(Self::random(k, seed)),
            "EB" => Ok(Self::embedding(k, seed)),
            "BAG" => Ok(Self::bagging(k, seed)),
            "CC" => reference_center
                .map(|c| Self::cross_center(c, k, seed))
                .ok_or_else(|| SelectionError::InvalidStrategy("CC needs a reference center".into())),
            _ => {
                let mut attrs = Vec::new();
                let mut rest = upper.as_str();
                for (letter, name) in [("S", SEX), ("V", VIEW), ("P", PROJECTION)] {
                    if let Some(r) = rest.strip_prefix(letter) {
                        attrs.push(name);
                        rest = r;
                    }
                }
                let mut custom = Vec::new();
                while let Some(r) = rest.strip_prefix('[') {
                    let Some(end) = r.find(']').filter(|&e| e > 0) else { break };
                    custom.push(label[label.len() - r.len()..][..end].to_string());
                    rest = &r[end + 1..];
                }
                let attrs: Vec<String> = attrs.into_iter().map(String::from).chain(custom).collect();
                if attrs.is_empty() || !rest.is_empty() {
                    return Err(SelectionError::InvalidStrategy(format!("unknown strategy label {label:?}")));
                }
                Ok(Self::demographic(attrs, k, seed))
            }
        }
    }

    /// Short label (`SVP`, `RS`, `CC`, ...) for tables.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::Random => "RS".into(),
            StrategyKind::Embedding => "EB".into(),
            StrategyKind::CrossCenter => "CC".into(),
            StrategyKind::Bagging => "BAG".into(),
            StrategyKind::Demographic => self
                .match_attributes
                .iter()
                .map(|a| match a.as_str() {
                    SEX => "S".to_string(),
                    VIEW => "V".to_string(),
                    PROJECTION => "P".to_string(),
                    other => format!("[{other}]"),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: &str| Err(SelectionError::InvalidStrategy(m.into()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        match self.kind {
            StrategyKind::Demographic if self.match_attributes.is_empty() => bad("demographic needs match_attributes"),
            StrategyKind::Demographic => Ok(()),
            _ if !self.match_attributes.is_empty() => bad("match_attributes only apply to demographic"),
            StrategyKind::Bagging if self.k < 2 => bad("bagging needs k >= 2"),
            StrategyKind::CrossCenter if self.reference_center.is_none() => bad("cross-center needs reference_center"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAssignment {
    pub query_id: String,
    pub reference_ids: Vec<String>,
    pub strategy: SelectionStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_scores: Option<Vec<f64>>,
    /// Set when the filtered pool held fewer than `k` candidates.
    #[serde(default)]
    pub pool_exhausted: bool,
    /// Demographic only: the attributes actually matched after relaxation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_attributes: Option<Vec<String>>,
}

impl ReferenceAssignment {
    pub fn achieved_k(&self) -> usize {
        self.reference_ids.len()
    }

    pub fn relaxed(&self) -> bool {
        self.matched_attributes.as_ref().is_some_and(|m| m.len() < self.strategy.match_attributes.len())
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Indices of the `k` pool vectors most cosine-similar to `query`, best first.
/// Ties break towards the lower index (pools are id-sorted, so lower id).
pub fn top_k_cosine(query: &[f64], pool: &[&[f64]], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = pool.iter().enumerate().map(|(i, v)| (i, cosine(query, v))).collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(scored.len());
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored.truncate(k);
    scored
}

/// One assignment per query, in query order.
pub fn select_references(
    catalog: &Catalog,
    query_ids: &[String],
    strategy: &SelectionStrategy,
) -> Result<Vec<ReferenceAssignment>, SelectionError> {
    select_references_with(catalog, query_ids, strategy, Execution::Parallel)
}

pub fn select_references_with(
    catalog: &Catalog,
    query_ids: &[String],
    strategy: &SelectionStrategy,
    exec: Execution,
) -> Result<Vec<ReferenceAssignment>, SelectionError> {
    strategy.validate()?;
    catalog.check_attributes(strategy.match_attributes.iter().map(String::as_str))?;
    let mut filter = PoolFilter::healthy_train();
    filter.attributes = strategy.value_filter.clone();
    if let Some(center) = &strategy.reference_center {
        if !catalog.centers().contains(center.as_str()) {
            return Err(SelectionError::InvalidStrategy(format!("center {center:?} not in catalog")));
        }
        filter.center = Some(center.clone());
    }
    let pool = catalog.pool(&filter)?;
    let pool_vectors: Option<Vec<&[f64]>> = if strategy.kind == StrategyKind::Embedding {
        let table = catalog.embeddings().ok_or(SelectionError::NoEmbeddings)?;
        Some(
            pool.iter()
                .map(|r| r.embedding_ref.map(|i| table.row(i)).ok_or_else(|| SelectionError::MissingEmbedding(r.id.clone())))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    let ctx = Context { catalog, strategy, pool: &pool, pool_vectors: pool_vectors.as_deref() };
    exec::map_slice(query_ids, exec, |q| ctx.assign(q)).into_iter().collect()
}

struct Context<'a> {
    catalog: &'a Catalog,
    strategy: &'a SelectionStrategy,
    pool: &'a [&'a ImageRecord],
    pool_vectors: Option<&'a [&'a [f64]]>,
}

impl Context<'_> {
    fn assign(&self, query_id: &String) -> Result<ReferenceAssignment, SelectionError> {
        let query = self.catalog.get(query_id).ok_or_else(|| SelectionError::UnknownQuery(query_id.clone()))?;
        let s = self.strategy;
        if let Some(center) = &s.reference_center {
            if *center == query.center {
                return Err(SelectionError::InvalidStrategy(format!(
                    "reference center {center:?} equals the center of query {query_id:?}"
                )));
            }
        }
        let stage = match s.kind {
            _ if !self.pool.is_empty() => "self-exclusion",
            StrategyKind::CrossCenter => "center filter",
            _ if !s.value_filter.is_empty() => "value filter",
            _ => "healthy-control train filter",
        };
        // Positions into `self.pool`, query removed.
        let mut candidates: Vec<usize> = (0..self.pool.len()).filter(|&i| self.pool[i].id != *query_id).collect();
        if candidates.is_empty() {
            return Err(SelectionError::EmptyPool { query: query_id.clone(), stage: stage.into() });
        }
        let mut rng = hash::item_rng(s.seed, query_id);
        let mut out = ReferenceAssignment {
            query_id: query_id.clone(),
            reference_ids: Vec::new(),
            strategy: s.clone(),
            similarity_scores: None,
            pool_exhausted: candidates.len() < s.k,
            matched_attributes: None,
        };
        match s.kind {
            StrategyKind::Embedding => {
                let vectors = self.pool_vectors.expect("embedding pool prepared");
                let qv = self.catalog.embedding(query_id).ok_or_else(|| SelectionError::MissingEmbedding(query_id.clone()))?;
                let sub: Vec<&[f64]> = candidates.iter().map(|&i| vectors[i]).collect();
                let top = top_k_cosine(qv, &sub, s.k);
                out.reference_ids = top.iter().map(|&(j, _)| self.pool[candidates[j]].id.clone()).collect();
                out.similarity_scores = Some(top.iter().map(|&(_, c)| c).collect());
                return Ok(out);
            }
            StrategyKind::Demographic => {
                let mut attrs: Vec<String> = s.match_attributes.clone();
                loop {
                    let matched: Vec<usize> = candidates
                        .iter()
                        .copied()
                        .filter(|&i| {
                            attrs.iter().all(|a| {
                                let qv = query.attribute(a);
                                qv.is_some() && self.pool[i].attribute(a) == qv
                            })
                        })
                        .collect();
                    if !matched.is_empty() {
                        candidates = matched;
                        break;
                    }
                    attrs.pop();
                }
                out.pool_exhausted = candidates.len() < s.k;
                out.matched_attributes = Some(attrs);
            }
            StrategyKind::Random | StrategyKind::Bagging | StrategyKind::CrossCenter => {}
        }
        let take = s.k.min(candidates.len());
        out.reference_ids = index::sample(&mut rng, candidates.len(), take)
            .into_iter()
            .map(|j| self.pool[candidates[j]].id.clone())
            .collect();
        Ok(out)
    }
}
