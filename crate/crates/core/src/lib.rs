//! Desk-scale rationale-embedding multimodal language model.
//!
//! A selective state-space "rationale embedder" compresses long rationales
//! into features at `<tor>` special-token positions; those features are
//! injected into a small causal multimodal decoder trained in two stages.
//! The crate also carries the surrounding dataset-curation, ablation, and
//! analysis machinery, all on a hand-rolled reverse-mode tape whose
//! gradients are verified against central finite differences.

pub mod backbone;
pub mod datapipe;
pub mod embedder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
