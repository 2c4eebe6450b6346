//! Curation pipeline that turns terse multimodal Q&A data into rationale-rich
//! instruction/response data.
//!
//! The stages are: ingest and screen sources, rewrite Group B samples with
//! category-specific prompts, filter rewrites with a model judge, score
//! quality, analyse agreement and length distributions, and mix original and
//! rewritten pools into training manifests. Every stage is resumable and
//! deterministic for a fixed input, seed and backend script.

pub mod analytics;
pub mod config;
pub mod corpus;
pub mod filter;
pub mod inference;
pub mod ingest;
pub mod jsonl;
pub mod mixer;
pub mod parse;
pub mod pipeline;
pub mod prompts;
pub mod reports;
pub mod rewrite;
pub mod stage;
pub mod store;

pub use corpus::{Category, MediaKind, Provenance, Role, Sample, ScreeningGroup, SourceSpec, Turn};
