//! Retrieval-augmented post-hoc correction of ML model predictions.
//!
//! A knowledge database of labelled training molecules and validation
//! molecules (with the model's own predictions) is embedded and searched for
//! each query; the retrieved context goes into a corrector prompt, the LLM
//! proposes a refined prediction, and large changes are re-checked with a
//! self-correction prompt. Refined predictions are scored against the
//! model's baseline with ROC-AUC or RMSE.

pub mod app;
pub mod config;
pub mod correct;
pub mod embed;
pub mod error;
pub mod evaluate;
pub mod hashing;
pub mod http;
pub mod ingest;
pub mod knowledge;
pub mod llmclient;
pub mod parse;
pub mod prompt;

pub use error::{Error, Result};
