//! Harness for zero-shot image classification with black-box chat vision
//! backends.
//!
//! The crate is organized along the pipeline:
//!
//! - [`dataset`]: image manifests with ground-truth labels, splits, anonymization
//! - [`preprocess`]: deterministic resizing and augmentation
//! - [`prompts`]: the fixed prompt protocols rendered into conversations
//! - [`backends`]: pluggable chat-with-image backends (remote HTTP + scripted mock)
//!   with caching, rate limiting, retries, and a call ledger
//! - [`extraction`]: free-text answers into structured categories and task labels
//! - [`metrics`]: confusion matrices, F1, weighted F1, AUROC
//! - [`tilense`]: tile-occlusion importance scores and heatmaps
//! - [`runner`]: manifest x prompt x backend evaluation runs with resume
//! - [`report`]: report bundles and golden-number fixture verification

pub mod backends;
pub mod dataset;
pub mod extraction;
pub mod metrics;
pub mod preprocess;
pub mod prompts;
pub mod report;
pub mod runner;
pub mod tilense;
