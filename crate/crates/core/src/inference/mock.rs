//! Deterministic in-process backends.
//!
//! * [`MockHash`]: scores are a stable hash of (bundle fingerprint, candidate)
//!   mapped to [-1, 0]. Pixels are never read.
//! * [`MockNuisance`]: binary tasks only. With `m` the mean luma in [0, 1],
//!   `score(yes) - score(no)` is `gain * (m_query - bias)` for single bundles
//!   and `gain * (m_query - mean(m_ref) - comparative_bias)` for comparative
//!   ones. Defaults: gain 10, bias 0.5, comparative_bias 0.
//! * [`MockPlanted`]: `score(first candidate) = gain * mean luma of the query
//!   inside [rect_x0, rect_x1) x [rect_y0, rect_y1)`; every other candidate
//!   scores 0. Default gain 10.

use super::{Backend, BackendDescriptor, InferenceError, ScoreVector};
use crate::hash::stable_hash64;
use crate::imaging::{mean_intensity, mean_intensity_in, SlotImages};
use crate::prompting::{PromptBundle, PromptMode};

pub struct MockHash {
    desc: BackendDescriptor,
}

impl MockHash {
    pub fn new(desc: BackendDescriptor) -> Self {
        Self { desc }
    }
}

impl Backend for MockHash {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn score_images(&self, bundle: &PromptBundle, _images: &SlotImages) -> Result<ScoreVector, InferenceError> {
        let fp = bundle.fingerprint();
        let scores = bundle
            .candidates
            .answers()
            .iter()
            .map(|c| {
                let mut key = fp.as_bytes().to_vec();
                key.push(0);
                key.extend_from_slice(c.as_bytes());
                -(stable_hash64(&key) as f64 / u64::MAX as f64)
            })
            .collect();
        Ok(ScoreVector::logprob(scores))
    }
}

pub struct MockNuisance {
    desc: BackendDescriptor,
}

impl MockNuisance {
    pub fn new(desc: BackendDescriptor) -> Self {
        Self { desc }
    }

    /// Closed-form score difference `score(yes) - score(no)` for given means.
    pub fn margin(&self, query_mean: f64, reference_means: &[f64]) -> f64 {
        let gain = self.desc.param("gain", 10.0);
        if reference_means.is_empty() {
            gain * (query_mean - self.desc.param("bias", 0.5))
        } else {
            let m_ref = reference_means.iter().sum::<f64>() / reference_means.len() as f64;
            gain * (query_mean - m_ref - self.desc.param("comparative_bias", 0.0))
        }
    }
}

impl Backend for MockNuisance {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn score_images(&self, bundle: &PromptBundle, images: &SlotImages) -> Result<ScoreVector, InferenceError> {
        if bundle.candidates.len() != 2 {
            return Err(InferenceError::Protocol("mock-nuisance scores binary candidate sets only".into()));
        }
        let mean_of = |slot: usize| -> Result<f64, InferenceError> { Ok(mean_intensity(&images.get(slot)?.decode()?.to_luma8())) };
        let query = mean_of(0)?;
        let refs = match bundle.mode {
            PromptMode::Single => Vec::new(),
            PromptMode::Comparative => (1..images.len()).map(mean_of).collect::<Result<_, _>>()?,
        };
        Ok(ScoreVector::logprob(vec![self.margin(query, &refs), 0.0]))
    }
}

pub struct MockPlanted {
    desc: BackendDescriptor,
}

impl MockPlanted {
    pub fn new(desc: BackendDescriptor) -> Self {
        Self { desc }
    }

    pub fn rectangle(&self) -> (u32, u32, u32, u32) {
        let p = |n: &str| self.desc.param(n, 0.0).max(0.0) as u32;
        (p("rect_x0"), p("rect_y0"), p("rect_x1"), p("rect_y1"))
    }
}

impl Backend for MockPlanted {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn score_images(&self, bundle: &PromptBundle, images: &SlotImages) -> Result<ScoreVector, InferenceError> {
        let query = images.get(0)?.decode()?.to_luma8();
        let (x0, y0, x1, y1) = self.rectangle();
        let mut scores = vec![0.0; bundle.candidates.len()];
        scores[0] = self.desc.param("gain", 10.0) * mean_intensity_in(&query, x0, y0, x1, y1);
        Ok(ScoreVector::logprob(scores))
    }
}
