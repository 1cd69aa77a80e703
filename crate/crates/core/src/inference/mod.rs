//! Candidate scoring, decisions, bagging and experiment runs.
//!
//! A backend returns one score per candidate answer: the summed token
//! log-probability of that answer given the serialized input (or a proxy for
//! it, in the mocks). The decision is the argmax, ties going to the earliest
//! candidate. Bagging runs one decision per (query, reference) pair and takes
//! a plurality vote.

mod log;
mod mock;
mod remote;
mod runner;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImagingError, SlotImages};
use crate::prompting::{CandidateAnswerSet, PromptBundle, PromptError};

pub use log::{read_decision_log, DecisionLog, LogRecord, Provenance, DECISIONS_MAGIC};
pub use mock::{MockHash, MockNuisance, MockPlanted};
pub use remote::{wire, RemoteBackend};
pub use runner::{quarantine_path, run_experiment, ExperimentPlan, QuarantineEntry, RunMode, RunSummary};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{scores} scores for {candidates} candidates")]
    LengthMismatch { scores: usize, candidates: usize },
    #[error("bagged decisions mix query ids {0:?} and {1:?}")]
    MixedQueries(String, String),
    #[error("nothing to aggregate")]
    NoDecisions,
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("decision log: {0}")]
    Log(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Remote,
    MockHash,
    MockNuisance,
    MockPlanted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    #[default]
    Logprob,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub attempts: u32,
    /// Base delay; doubled after every failed attempt.
    pub backoff_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, backoff_secs: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub scoring: ScoringMode,
    /// Divide summed log-probabilities by token count.
    #[serde(default)]
    pub length_normalize: bool,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default)]
    pub mock_params: BTreeMap<String, f64>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_parallel() -> usize {
    4
}

impl BackendDescriptor {
    pub fn mock(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model: String::new(),
            timeout_secs: default_timeout(),
            max_parallel: default_parallel(),
            retry: RetryPolicy::default(),
            scoring: ScoringMode::Logprob,
            length_normalize: false,
            token_env: None,
            mock_params: BTreeMap::new(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self { endpoint: Some(endpoint.into()), model: model.into(), ..Self::mock(BackendKind::Remote) }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.mock_params.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.kind == BackendKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(InferenceError::Config("remote backend requires an endpoint".into()));
        }
        if self.max_parallel == 0 {
            return Err(InferenceError::Config("max_parallel must be positive".into()));
        }
        if self.retry.attempts == 0 {
            return Err(InferenceError::Config("retry.attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn param(&self, name: &str, default: f64) -> f64 {
        self.mock_params.get(name).copied().unwrap_or(default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    /// Aligned with the bundle's candidate order.
    pub scores: Vec<f64>,
    pub source_mode: ScoringMode,
    #[serde(default)]
    pub abstained: bool,
}

impl ScoreVector {
    pub fn logprob(scores: Vec<f64>) -> Self {
        Self { scores, source_mode: ScoringMode::Logprob, abstained: false }
    }

    /// One-hot vector for a generated answer, or all zeros with `abstained`.
    pub fn generated(choice: Option<usize>, n: usize) -> Self {
        let mut scores = vec![0.0; n];
        if let Some(i) = choice {
            scores[i] = 1.0;
        }
        Self { scores, source_mode: ScoringMode::Generate, abstained: choice.is_none() }
    }
}

/// Model outcome for one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub query_id: String,
    pub bundle_fingerprint: String,
    pub scores: ScoreVector,
    /// `None` is an abstention.
    pub chosen: Option<String>,
    pub tie_broken: bool,
}

impl Decision {
    pub fn new(query_id: impl Into<String>, bundle: &PromptBundle, scores: ScoreVector) -> Result<Self, InferenceError> {
        let (chosen, tie_broken) = decide(&scores, &bundle.candidates)?;
        Ok(Self {
            query_id: query_id.into(),
            bundle_fingerprint: bundle.fingerprint(),
            chosen: chosen.map(|i| bundle.candidates.answers()[i].clone()),
            tie_broken,
            scores,
        })
    }
}

/// Argmax over candidates with earliest-candidate tie-break.
/// Returns the chosen index (`None` on abstention) and whether a tie occurred.
pub fn decide(scores: &ScoreVector, candidates: &CandidateAnswerSet) -> Result<(Option<usize>, bool), InferenceError> {
    if scores.scores.len() != candidates.len() {
        return Err(InferenceError::LengthMismatch { scores: scores.scores.len(), candidates: candidates.len() });
    }
    if scores.abstained {
        return Ok((None, false));
    }
    let mut best = 0;
    for (i, &s) in scores.scores.iter().enumerate().skip(1) {
        if s > scores.scores[best] {
            best = i;
        }
    }
    let top = scores.scores[best];
    let tie = scores.scores.iter().filter(|&&s| s == top).count() > 1;
    Ok((Some(best), tie))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedDecision {
    pub query_id: String,
    pub members: Vec<Decision>,
    /// `None` when abstentions strictly outvote every candidate.
    pub final_answer: Option<String>,
    pub vote_counts: BTreeMap<String, usize>,
    pub abstain_votes: usize,
    pub tie_broken: bool,
}

/// Plurality vote. Abstentions form their own class, which wins only with a
/// strict majority over every candidate; candidate ties go to candidate order.
pub fn bag(decisions: Vec<Decision>, candidates: &CandidateAnswerSet) -> Result<BaggedDecision, InferenceError> {
    let first = decisions.first().ok_or(InferenceError::NoDecisions)?;
    let query_id = first.query_id.clone();
    if let Some(other) = decisions.iter().find(|d| d.query_id != query_id) {
        return Err(InferenceError::MixedQueries(query_id, other.query_id.clone()));
    }
    let mut counts = vec![0usize; candidates.len()];
    let mut abstain_votes = 0;
    for d in &decisions {
        match d.chosen.as_deref() {
            None => abstain_votes += 1,
            Some(a) => match candidates.position(a) {
                Some(i) => counts[i] += 1,
                None => return Err(InferenceError::Protocol(format!("vote {a:?} is not a candidate"))),
            },
        }
    }
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    let tie_broken = counts.iter().filter(|&&c| c == counts[best]).count() > 1;
    let final_answer = (counts[best] >= abstain_votes).then(|| candidates.answers()[best].clone());
    let vote_counts = candidates.answers().iter().cloned().zip(counts).collect();
    Ok(BaggedDecision { query_id, members: decisions, final_answer, vote_counts, abstain_votes, tie_broken })
}

/// Scores candidate answers for a bundle.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Scores `bundle` using `images` in place of the bundle's uris (same slot
    /// order). Attribution passes occluded copies through here.
    fn score_images(&self, bundle: &PromptBundle, images: &SlotImages) -> Result<ScoreVector, InferenceError>;
}

/// Scores a bundle with the images its slots point to.
pub fn score(bundle: &PromptBundle, backend: &dyn Backend) -> Result<ScoreVector, InferenceError> {
    backend.score_images(bundle, &SlotImages::from_bundle(bundle))
}

pub fn build_backend(desc: &BackendDescriptor) -> Result<Box<dyn Backend>, InferenceError> {
    desc.validate()?;
    Ok(match desc.kind {
        BackendKind::Remote => Box::new(RemoteBackend::new(desc.clone())?),
        BackendKind::MockHash => Box::new(MockHash::new(desc.clone())),
        BackendKind::MockNuisance => Box::new(MockNuisance::new(desc.clone())),
        BackendKind::MockPlanted => Box::new(MockPlanted::new(desc.clone())),
    })
}
