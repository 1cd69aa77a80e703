//! Serialized model inputs: ordered image slots plus instruction text.
//!
//! The query image always occupies slot 0. Comparative bundles follow it with
//! one or more healthy-control reference slots.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ImageRecord};
use crate::hash;
use crate::selection::ReferenceAssignment;

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("candidate answer set is empty")]
    EmptyCandidates,
    #[error("duplicate candidate {0:?}")]
    DuplicateCandidate(String),
    #[error("unresolved placeholder {{{0}}} in template {1:?}")]
    UnresolvedPlaceholder(String, String),
    #[error("unterminated placeholder in template {0:?}")]
    Unterminated(String),
    #[error("template file: {0}")]
    TemplateFile(String),
    #[error("reference id {0:?} not in catalog")]
    DanglingReference(String),
    #[error("query id {0:?} not in catalog")]
    UnknownQuery(String),
    #[error("assignment has no references")]
    NoReferences,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAnswerSet {
    pub task: String,
    answers: Vec<String>,
}

impl CandidateAnswerSet {
    pub fn new<S: Into<String>>(task: impl Into<String>, answers: impl IntoIterator<Item = S>) -> Result<Self, PromptError> {
        let answers: Vec<String> = answers.into_iter().map(Into::into).collect();
        if answers.is_empty() {
            return Err(PromptError::EmptyCandidates);
        }
        for (i, a) in answers.iter().enumerate() {
            if answers[..i].contains(a) {
                return Err(PromptError::DuplicateCandidate(a.clone()));
            }
        }
        Ok(Self { task: task.into(), answers })
    }

    pub fn binary(task: impl Into<String>) -> Self {
        Self::new(task, ["yes", "no"]).expect("static candidates")
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn position(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }
}

/// Maps catalog labels onto a candidate answer set.
///
/// A catalog with a single positive label is a binary task answered `yes` /
/// `no`. Otherwise every label is its own answer, positives first, in declared
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVocabulary {
    pub candidates: CandidateAnswerSet,
    /// Answer counted as the positive class for binary F1.
    pub positive_answer: Option<String>,
    negative_labels: Vec<String>,
    positive_labels: Vec<String>,
}

impl TaskVocabulary {
    pub fn for_catalog(catalog: &Catalog) -> Self {
        let negatives = catalog.negative_labels.clone();
        let positives = catalog.positive_labels.clone();
        if positives.len() == 1 {
            Self {
                candidates: CandidateAnswerSet::binary(catalog.task.clone()),
                positive_answer: Some("yes".into()),
                negative_labels: negatives,
                positive_labels: positives,
            }
        } else {
            let answers: Vec<String> = positives.iter().chain(&negatives).cloned().collect();
            Self {
                candidates: CandidateAnswerSet::new(catalog.task.clone(), answers).expect("labels are unique"),
                positive_answer: None,
                negative_labels: negatives,
                positive_labels: positives,
            }
        }
    }

    pub fn answer_for_label(&self, label: &str) -> Option<&str> {
        if self.positive_answer.is_some() {
            if self.positive_labels.iter().any(|l| l == label) {
                return Some("yes");
            }
            if self.negative_labels.iter().any(|l| l == label) {
                return Some("no");
            }
            return None;
        }
        self.candidates.answers().iter().find(|a| *a == label).map(String::as_str)
    }

    pub fn is_binary(&self) -> bool {
        self.positive_answer.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub single_text: String,
    pub comparative_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

impl PromptTemplate {
    /// Parses a keyed template file: an optional `id = <name>` line and
    /// `[single]` / `[comparative]` blocks. `#` lines outside blocks are comments.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut id = None;
        let mut single: Option<Vec<&str>> = None;
        let mut comparative: Option<Vec<&str>> = None;
        let mut current: Option<&mut Vec<&str>> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            match trimmed {
                "[single]" => current = Some(single.insert(Vec::new())),
                "[comparative]" => current = Some(comparative.insert(Vec::new())),
                _ => match current.as_deref_mut() {
                    Some(block) => block.push(line),
                    None if trimmed.is_empty() || trimmed.starts_with('#') => {}
                    None => match trimmed.split_once('=') {
                        Some((k, v)) if k.trim() == "id" => id = Some(v.trim().to_string()),
                        _ => return Err(PromptError::TemplateFile(format!("unexpected line {trimmed:?}"))),
                    },
                },
            }
        }
        let join = |b: Option<Vec<&str>>, name: &str| -> Result<String, PromptError> {
            let b = b.ok_or_else(|| PromptError::TemplateFile(format!("missing [{name}] block")))?;
            let text = b.join("\n").trim().to_string();
            if text.is_empty() {
                return Err(PromptError::TemplateFile(format!("empty [{name}] block")));
            }
            Ok(text)
        };
        Ok(Self {
            template_id: id.unwrap_or_else(|| "custom".into()),
            single_text: join(single, "single")?,
            comparative_text: join(comparative, "comparative")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::TemplateFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render_single(&self, candidates: &CandidateAnswerSet) -> Result<String, PromptError> {
        render(&self.template_id, &self.single_text, candidates, None)
    }

    pub fn render_comparative(&self, candidates: &CandidateAnswerSet, n_refs: usize) -> Result<String, PromptError> {
        render(&self.template_id, &self.comparative_text, candidates, Some(n_refs))
    }
}

fn render(id: &str, text: &str, candidates: &CandidateAnswerSet, n_refs: Option<usize>) -> Result<String, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::EmptyCandidates);
    }
    let mut out = String::with_capacity(text.len() + 32);
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| PromptError::Unterminated(id.to_string()))?;
        let name = &after[..close];
        match (name, n_refs) {
            ("task", _) => out.push_str(&candidates.task),
            ("candidates", _) => out.push_str(&candidates.answers().join(", ")),
            ("n_refs", Some(n)) => out.push_str(&n.to_string()),
            _ => return Err(PromptError::UnresolvedPlaceholder(name.to_string(), id.to_string())),
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Single,
    Comparative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotRole {
    Query,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub role: SlotRole,
    pub record_id: String,
    pub uri: String,
}

impl ImageSlot {
    fn of(role: SlotRole, r: &ImageRecord) -> Self {
        Self { role, record_id: r.id.clone(), uri: r.uri.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub mode: PromptMode,
    pub image_slots: Vec<ImageSlot>,
    pub instruction: String,
    pub candidates: CandidateAnswerSet,
    pub template_id: String,
}

impl PromptBundle {
    pub fn query(&self) -> &ImageSlot {
        &self.image_slots[0]
    }

    pub fn references(&self) -> &[ImageSlot] {
        &self.image_slots[1..]
    }

    /// Canonical JSON bytes; identical inputs give identical bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("bundle serializes")
    }

    pub fn fingerprint(&self) -> String {
        hash::fingerprint(&self.canonical_bytes())
    }
}

pub fn build_single(record: &ImageRecord, template: &PromptTemplate, candidates: &CandidateAnswerSet) -> Result<PromptBundle, PromptError> {
    Ok(PromptBundle {
        mode: PromptMode::Single,
        image_slots: vec![ImageSlot::of(SlotRole::Query, record)],
        instruction: template.render_single(candidates)?,
        candidates: candidates.clone(),
        template_id: template.template_id.clone(),
    })
}

/// Comparative bundles for one assignment.
///
/// With `per_pair` (bagging, multi-tuple SFT) each reference gets its own
/// two-slot bundle; otherwise a single bundle carries every reference.
pub fn build_comparative(
    assignment: &ReferenceAssignment,
    catalog: &Catalog,
    template: &PromptTemplate,
    candidates: &CandidateAnswerSet,
    per_pair: bool,
) -> Result<Vec<PromptBundle>, PromptError> {
    let query = catalog.get(&assignment.query_id).ok_or_else(|| PromptError::UnknownQuery(assignment.query_id.clone()))?;
    let refs: Vec<&ImageRecord> = assignment
        .reference_ids
        .iter()
        .map(|id| catalog.get(id).ok_or_else(|| PromptError::DanglingReference(id.clone())))
        .collect::<Result<_, _>>()?;
    if refs.is_empty() {
        return Err(PromptError::NoReferences);
    }
    let make = |group: &[&ImageRecord]| -> Result<PromptBundle, PromptError> {
        let mut slots = vec![ImageSlot::of(SlotRole::Query, query)];
        slots.extend(group.iter().map(|r| ImageSlot::of(SlotRole::Reference, r)));
        Ok(PromptBundle {
            mode: PromptMode::Comparative,
            image_slots: slots,
            instruction: template.render_comparative(candidates, group.len())?,
            candidates: candidates.clone(),
            template_id: template.template_id.clone(),
        })
    };
    if per_pair {
        refs.iter().map(|r| make(std::slice::from_ref(r))).collect()
    } else {
        Ok(vec![make(&refs)?])
    }
}

/// First candidate (declared order) occurring as a substring of the
/// lowercased generation; `None` means abstain.
pub fn extract_answer(generation: &str, candidates: &CandidateAnswerSet) -> Option<usize> {
    let lower = generation.to_lowercase();
    candidates.answers().iter().position(|c| lower.contains(&c.to_lowercase()))
}
