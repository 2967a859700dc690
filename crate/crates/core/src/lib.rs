//! Retrieval-augmented zero-shot image classification over precomputed
//! embeddings.
//!
//! A query image is classified twice: once directly against class prompt
//! embeddings, and once through captions retrieved from an image-caption
//! corpus. The two class distributions are mixed per sample with weights
//! derived from their entropy-based confidences, min-max normalized over the
//! stream seen so far.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod inference;
pub mod knn;
pub mod retrieval;
pub mod store;
pub mod synth;

pub use config::EngineConfig;
pub use ensemble::{EnsembleMode, EnsembleOutput, EnsembleState};
pub use error::{Error, Result};
pub use eval::{EvalRun, Pipeline, RetrievalMode};
pub use inference::{InferenceConfig, Prediction};
pub use knn::{Index, IndexMode, IvfLayout, Probes, SearchResult};
pub use retrieval::{RetrievalConfig, RetrievedCaptions, Retriever};
pub use store::{ClassSet, Corpus, EmbeddingMatrix, EmbeddingSpace, QuerySet};
