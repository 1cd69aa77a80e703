//! Comparative (paired query + healthy reference) diagnosis harness.
//!
//! The crate is organised bottom-up:
//!
//! * [`catalog`] ingests line-delimited manifests and embedding sidecars.
//! * [`selection`] picks healthy-control references per query and builds
//!   size-matched negative subsets.
//! * [`prompting`] serializes single and comparative model inputs.
//! * [`inference`] scores candidate answers through a [`inference::Backend`],
//!   decides, bags, and runs resumable experiments.
//! * [`sft`] emits comparative fine-tuning tuples and fixed-budget schedules.
//! * [`metrics`] computes balanced accuracy, F1, Cohen's kappa, agreement and
//!   bootstrap summaries.
//! * [`attribution`] produces occlusion-sensitivity heatmaps.
//!
//! Data-parallel loops (bootstrap replicates, occlusion cells, per-query
//! selection and scoring) go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod attribution;
pub mod catalog;
pub mod exec;
pub mod hash;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod prompting;
pub mod selection;
pub mod sft;
pub mod synth;

pub use catalog::{Catalog, EmbeddingTable, ImageRecord, Partition, PoolFilter, Split};
pub use exec::Execution;
pub use inference::{Backend, Decision, ScoreVector};
pub use prompting::{CandidateAnswerSet, PromptBundle, PromptTemplate};
pub use selection::{ReferenceAssignment, SelectionStrategy, StrategyKind};
