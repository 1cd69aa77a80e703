use std::collections::BTreeMap;
use std::fmt::Write;

use super::{ReferenceAssignment, SelectionError, SelectionStrategy};
use crate::catalog::Catalog;

/// Per-strategy summary of a batch of assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditSummary {
    pub strategy: SelectionStrategy,
    pub assignments: usize,
    pub references: usize,
    pub pool_exhausted: usize,
    pub relaxed: usize,
    /// Fraction of assignments whose references match the query on every
    /// requested attribute. `None` for non-demographic strategies.
    pub attribute_match_rate: Option<f64>,
    /// How often each reference id was used.
    pub usage: BTreeMap<String, usize>,
}

pub fn audit(catalog: &Catalog, assignments: &[ReferenceAssignment]) -> Result<AuditSummary, SelectionError> {
    let first = assignments.first().ok_or(SelectionError::NoAssignments)?;
    if assignments.iter().any(|a| a.strategy != first.strategy) {
        return Err(SelectionError::HeterogeneousStrategies);
    }
    let strategy = first.strategy.clone();
    let mut usage = BTreeMap::new();
    let mut matched = 0usize;
    for a in assignments {
        for r in &a.reference_ids {
            *usage.entry(r.clone()).or_insert(0) += 1;
        }
        let query = catalog.get(&a.query_id);
        let ok = a.reference_ids.iter().all(|r| {
            let (Some(q), Some(rec)) = (query, catalog.get(r)) else { return false };
            strategy.match_attributes.iter().all(|attr| q.attribute(attr).is_some() && q.attribute(attr) == rec.attribute(attr))
        });
        matched += usize::from(ok);
    }
    let attribute_match_rate =
        (!strategy.match_attributes.is_empty()).then(|| matched as f64 / assignments.len() as f64);
    Ok(AuditSummary {
        assignments: assignments.len(),
        references: assignments.iter().map(|a| a.reference_ids.len()).sum(),
        pool_exhausted: assignments.iter().filter(|a| a.pool_exhausted).count(),
        relaxed: assignments.iter().filter(|a| a.relaxed()).count(),
        attribute_match_rate,
        usage,
        strategy,
    })
}

impl AuditSummary {
    /// Two CSV blocks separated by a blank line: the summary row, then the
    /// reference-usage histogram.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("strategy,kind,k,seed,assignments,references,pool_exhausted,relaxed,attribute_match_rate\n");
        let rate = self.attribute_match_rate.map(|r| format!("{r}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.strategy.label(),
            self.strategy.kind,
            self.strategy.k,
            self.strategy.seed,
            self.assignments,
            self.references,
            self.pool_exhausted,
            self.relaxed,
            rate
        )
        .unwrap();
        out.push_str("\nreference_id,uses\n");
        for (id, n) in &self.usage {
            writeln!(out, "{id},{n}").unwrap();
        }
        out
    }
}
