//! Document-level relation extraction with retrieved in-context examples.
//!
//! For each target document and relation, the pipeline retrieves the most
//! similar distantly-annotated documents, samples several demonstration sets
//! from them, prompts a completion backend once per set, and aggregates the
//! length-normalized subject/object probabilities across sets with softmax
//! weights derived from each set's similarity to the target.

pub mod context_sets;
pub mod corpus;
pub mod embed_store;
pub mod evaluation;
pub mod lm_client;
pub mod pipeline;
pub mod prompt;
pub mod scoring;
pub mod seeding;

pub use context_sets::{ContextPool, ContextSet, ExtractionConfig, Variant};
pub use corpus::{Corpus, Document, KnowledgeTriplet, RelationRegistry, RelationType, Split};
pub use embed_store::{EmbeddingStore, EmbeddingVector};
pub use evaluation::{EvalReport, KbStatus, KbVerifier, SnapshotKb};
pub use lm_client::{
    Backend, CompletionRequest, CompletionResponse, HttpBackend, LmClient, MockBackend,
};
pub use pipeline::{Prediction, RunManifest, RunOptions};
pub use scoring::{ScoredTriplet, SetExtraction};
