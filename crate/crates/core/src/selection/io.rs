//! Assignment and subset files.
//!
//! ```text
//! #sip-assign v1 rng=chacha8
//! {"query_id":"q1","reference_ids":["r7"],"strategy":{...},"pool_exhausted":false}
//! ```
//!
//! ```text
//! #sip-subset v1 method=cluster size=500 seed=7 rng=chacha8
//! n00017
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{NegativeSubset, ReferenceAssignment, SelectionError, SubsetMethod};
use crate::hash::RNG_ID;

pub const ASSIGN_MAGIC: &str = "#sip-assign";
pub const SUBSET_MAGIC: &str = "#sip-subset";

pub fn write_assignments(path: &Path, assignments: &[ReferenceAssignment]) -> Result<(), SelectionError> {
    let mut out = Vec::new();
    writeln!(out, "{ASSIGN_MAGIC} v1 rng={RNG_ID}")?;
    for a in assignments {
        writeln!(out, "{}", serde_json::to_string(a).expect("assignment serializes"))?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_assignments(path: &Path) -> Result<Vec<ReferenceAssignment>, SelectionError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with(&format!("{ASSIGN_MAGIC} v1")) => {}
        _ => return Err(SelectionError::Format(format!("missing {ASSIGN_MAGIC} v1 header"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| SelectionError::Format(format!("line {}: {e}", n + 2))))
        .collect()
}

pub fn write_subset(path: &Path, subset: &NegativeSubset) -> Result<(), SelectionError> {
    let mut out = Vec::new();
    writeln!(
        out,
        "{SUBSET_MAGIC} v1 method={} size={} seed={} rng={RNG_ID}",
        subset.method,
        subset.ids.len(),
        subset.seed
    )?;
    for id in &subset.ids {
        writeln!(out, "{id}")?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_subset(path: &Path) -> Result<NegativeSubset, SelectionError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut toks = header.split_whitespace();
    if toks.next() != Some(SUBSET_MAGIC) || toks.next() != Some("v1") {
        return Err(SelectionError::Format(format!("missing {SUBSET_MAGIC} v1 header")));
    }
    let (mut method, mut size, mut seed) = (None, None, None);
    for tok in toks {
        match tok.split_once('=') {
            Some(("method", v)) => method = Some(v.parse::<SubsetMethod>()?),
            Some(("size", v)) => size = v.parse::<usize>().ok(),
            Some(("seed", v)) => seed = v.parse::<u64>().ok(),
            _ => {}
        }
    }
    let ids: Vec<String> = lines.filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    let (Some(method), Some(size), Some(seed)) = (method, size, seed) else {
        return Err(SelectionError::Format("subset header needs method, size and seed".into()));
    };
    if ids.len() != size {
        return Err(SelectionError::Format(format!("header size {size} but {} ids", ids.len())));
    }
    Ok(NegativeSubset { method, ids, target_size: size, seed })
}
