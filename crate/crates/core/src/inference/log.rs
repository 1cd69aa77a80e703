//! Line-delimited decision log.
//!
//! ```text
//! #sip-decisions v1
//! #provenance {"strategy":...,"seed":7,"template_id":"default",...}
//! {"type":"decision","query_id":"q1",...}
//! {"type":"bagged","query_id":"q2",...}
//! ```
//!
//! The provenance line is written once, when the log is created. A trailing
//! line without a newline is an interrupted write and is discarded on reopen.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, BaggedDecision, Decision, InferenceError};
use super::runner::RunMode;
use crate::selection::SelectionStrategy;

pub const DECISIONS_MAGIC: &str = "#sip-decisions v1";
const PROVENANCE_PREFIX: &str = "#provenance ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `None` for single-image runs.
    pub strategy: Option<SelectionStrategy>,
    pub seed: u64,
    pub template_id: String,
    pub backend: BackendDescriptor,
    pub mode: RunMode,
    pub rng: String,
    /// Unix seconds at log creation.
    pub timestamp: u64,
}

impl Provenance {
    /// Equal up to the creation time.
    pub fn same_run(&self, other: &Provenance) -> bool {
        Provenance { timestamp: 0, ..self.clone() } == Provenance { timestamp: 0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Decision(Decision),
    Bagged(BaggedDecision),
}

impl LogRecord {
    pub fn query_id(&self) -> &str {
        match self {
            LogRecord::Decision(d) => &d.query_id,
            LogRecord::Bagged(b) => &b.query_id,
        }
    }

    /// Final answer; `None` is an abstention.
    pub fn answer(&self) -> Option<&str> {
        match self {
            LogRecord::Decision(d) => d.chosen.as_deref(),
            LogRecord::Bagged(b) => b.final_answer.as_deref(),
        }
    }
}

struct Parsed {
    provenance: Option<Provenance>,
    records: Vec<LogRecord>,
    /// Byte length of the complete, valid prefix.
    valid_len: u64,
}

fn parse(text: &str, strict: bool) -> Result<Parsed, InferenceError> {
    let mut provenance = None;
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut offset = 0usize;
    for (n, chunk) in text.split_inclusive('\n').enumerate() {
        offset += chunk.len();
        let Some(line) = chunk.strip_suffix('\n') else {
            if strict {
                return Err(InferenceError::Log(format!("line {} is incomplete", n + 1)));
            }
            break;
        };
        match n {
            0 if line != DECISIONS_MAGIC => return Err(InferenceError::Log(format!("bad header {line:?}"))),
            0 => {}
            1 => {
                let json = line
                    .strip_prefix(PROVENANCE_PREFIX)
                    .ok_or_else(|| InferenceError::Log("missing provenance line".into()))?;
                provenance = Some(serde_json::from_str(json).map_err(|e| InferenceError::Log(format!("provenance: {e}")))?);
            }
            _ => records.push(
                serde_json::from_str(line).map_err(|e| InferenceError::Log(format!("line {}: {e}", n + 1)))?,
            ),
        }
        valid_len = offset as u64;
    }
    if provenance.is_none() {
        valid_len = 0;
    }
    Ok(Parsed { provenance, records, valid_len })
}

/// Reads a finished log; incomplete lines are an error.
pub fn read_decision_log(path: &Path) -> Result<(Provenance, Vec<LogRecord>), InferenceError> {
    let text = fs::read_to_string(path)?;
    let parsed = parse(&text, true)?;
    let provenance = parsed.provenance.ok_or_else(|| InferenceError::Log(format!("{}: no provenance", path.display())))?;
    Ok((provenance, parsed.records))
}

/// Append-only writer; the single point of serialization for a run.
pub struct DecisionLog {
    path: PathBuf,
    out: BufWriter<File>,
    done: BTreeSet<String>,
    provenance: Provenance,
}

impl DecisionLog {
    /// Opens `path` for appending, creating it if absent. An existing log must
    /// carry the same provenance; its decided query ids are reported by
    /// [`is_done`](Self::is_done).
    pub fn open(path: &Path, provenance: Provenance) -> Result<Self, InferenceError> {
        let existing = match fs::read_to_string(path) {
            Ok(t) => Some(t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let parsed = match &existing {
            Some(text) => parse(text, false)?,
            None => Parsed { provenance: None, records: Vec::new(), valid_len: 0 },
        };
        let (provenance, done) = match parsed.provenance {
            Some(old) => {
                if !old.same_run(&provenance) {
                    return Err(InferenceError::Log(format!(
                        "{} was written by a different configuration; choose another output",
                        path.display()
                    )));
                }
                (old, parsed.records.iter().map(|r| r.query_id().to_string()).collect())
            }
            None => (provenance, BTreeSet::new()),
        };
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        file.set_len(parsed.valid_len)?;
        let mut file = OpenOptions::new().append(true).open(path)?;
        if parsed.valid_len == 0 {
            let json = serde_json::to_string(&provenance).expect("provenance serializes");
            writeln!(file, "{DECISIONS_MAGIC}\n{PROVENANCE_PREFIX}{json}")?;
            file.flush()?;
        }
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file), done, provenance })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_done(&self, query_id: &str) -> bool {
        self.done.contains(query_id)
    }

    pub fn done_count(&self) -> usize {
        self.done.len()
    }

    /// Writes one record and flushes the line.
    pub fn append(&mut self, record: &LogRecord) -> Result<(), InferenceError> {
        if !self.done.insert(record.query_id().to_string()) {
            return Err(InferenceError::Log(format!("query {:?} logged twice", record.query_id())));
        }
        let json = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{json}")?;
        self.out.flush()?;
        Ok(())
    }
}
