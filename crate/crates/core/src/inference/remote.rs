//! HTTP backend speaking the native scoring protocol.
//!
//! One JSON message per POST:
//!
//! ```json
//! {"model": "m", "images": [{"role": "query", "data": "<base64>"}], "text": "...",
//!  "candidates": ["yes", "no"]}
//! ```
//!
//! answered by `{"candidate_token_logprobs": [[-0.1, -0.2], [-1.3]]}`. In generate
//! mode the request carries `"generate": true` instead of `candidates` and the
//! answer is `{"text": "..."}`. Transport failures, timeouts, 429 and 5xx are
//! retried with doubling backoff; any other non-200 status and any malformed
//! 200 body is a protocol error and is not retried.
//!
//! Chat-completions style endpoints can be adapted by a shim that maps
//! `images` to image content parts and asks for per-token logprobs of each
//! candidate continuation; this client only speaks the native form.

use std::time::Duration;

use base64::Engine;

use super::{Backend, BackendDescriptor, InferenceError, ScoreVector, ScoringMode};
use crate::imaging::SlotImages;
use crate::prompting::{extract_answer, PromptBundle, SlotRole};

pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireImage {
        pub role: String,
        /// Base64 (standard alphabet, padded) image bytes.
        pub data: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ScoreRequest {
        pub model: String,
        pub images: Vec<WireImage>,
        pub text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub candidates: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub generate: Option<bool>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ScoreResponse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub candidate_token_logprobs: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub text: Option<String>,
    }
}

pub struct RemoteBackend {
    desc: BackendDescriptor,
    endpoint: String,
    agent: ureq::Agent,
    token: Option<String>,
}

impl RemoteBackend {
    pub fn new(desc: BackendDescriptor) -> Result<Self, InferenceError> {
        desc.validate()?;
        let endpoint = desc.endpoint.clone().ok_or_else(|| InferenceError::Config("missing endpoint".into()))?;
        let token = match &desc.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| InferenceError::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(desc.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { desc, endpoint, agent, token })
    }

    pub fn request_for(&self, bundle: &PromptBundle, images: &SlotImages) -> Result<wire::ScoreRequest, InferenceError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let images = bundle
            .image_slots
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                let role = match slot.role {
                    SlotRole::Query => "query",
                    SlotRole::Reference => "reference",
                };
                Ok(wire::WireImage { role: role.into(), data: b64.encode(images.get(i)?.encoded()?) })
            })
            .collect::<Result<Vec<_>, InferenceError>>()?;
        let generate = self.desc.scoring == ScoringMode::Generate;
        Ok(wire::ScoreRequest {
            model: self.desc.model.clone(),
            images,
            text: bundle.instruction.clone(),
            candidates: (!generate).then(|| bundle.candidates.answers().to_vec()),
            generate: generate.then_some(true),
        })
    }

    fn post(&self, body: &str) -> Result<String, InferenceError> {
        let attempts = self.desc.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.desc.retry.backoff_secs * f64::from(1u32 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_secs_f64(delay.max(0.0)));
            }
            let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
            if let Some(token) = &self.token {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            match req.send(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        return resp.body_mut().read_to_string().map_err(|e| InferenceError::Protocol(format!("unreadable body: {e}")));
                    }
                    if status == 429 || status >= 500 {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    return Err(InferenceError::Protocol(format!("HTTP {status}")));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(InferenceError::Network { attempts, message: last })
    }
}

/// Turns a response into a score vector for `bundle`'s candidates.
pub fn parse_response(
    body: &str,
    bundle: &PromptBundle,
    scoring: ScoringMode,
    length_normalize: bool,
) -> Result<ScoreVector, InferenceError> {
    let resp: wire::ScoreResponse =
        serde_json::from_str(body).map_err(|e| InferenceError::Protocol(format!("invalid response: {e}")))?;
    let n = bundle.candidates.len();
    match scoring {
        ScoringMode::Generate => {
            let text = resp.text.ok_or_else(|| InferenceError::Protocol("generate response lacks `text`".into()))?;
            Ok(ScoreVector::generated(extract_answer(&text, &bundle.candidates), n))
        }
        ScoringMode::Logprob => {
            let per = resp
                .candidate_token_logprobs
                .ok_or_else(|| InferenceError::Protocol("response lacks `candidate_token_logprobs`".into()))?;
            if per.len() != n {
                return Err(InferenceError::Protocol(format!("{} logprob lists for {n} candidates", per.len())));
            }
            let scores = per
                .iter()
                .enumerate()
                .map(|(i, toks)| {
                    if toks.is_empty() {
                        return Err(InferenceError::Protocol(format!("no tokens for candidate {i}")));
                    }
                    if toks.iter().any(|t| !t.is_finite()) {
                        return Err(InferenceError::Protocol(format!("non-finite logprob for candidate {i}")));
                    }
                    let sum: f64 = toks.iter().sum();
                    Ok(if length_normalize { sum / toks.len() as f64 } else { sum })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ScoreVector::logprob(scores))
        }
    }
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn score_images(&self, bundle: &PromptBundle, images: &SlotImages) -> Result<ScoreVector, InferenceError> {
        let request = self.request_for(bundle, images)?;
        let body = serde_json::to_string(&request).expect("request serializes");
        let resp = self.post(&body)?;
        parse_response(&resp, bundle, self.desc.scoring, self.desc.length_normalize)
    }
}
