//! Frozen per-user distillation targets.
//!
//! Item metadata along a user's history is rendered into a prompt, an LLM
//! writes a profile, a text encoder embeds it and a projection fitted on
//! training users maps the embedding into the recommender's hidden size.
//! The result is written once to a [`TargetStore`] and never modified.

pub mod encoder;
pub mod llm;
pub mod projection;
pub mod prompt;
pub mod store;
mod umap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{
    encode_profiles, EncodedProfiles, HttpEmbeddingClient, MockEncoder, TextEncoder,
};
pub use llm::{
    generate_profiles, ClientError, GenerationReport, HttpChatClient, LlmClient, MockLlm,
    ProfileCache, RetryPolicy,
};
pub use projection::{fit_projection, ProjectionMethod, ProjectionModel, UmapParams};
pub use prompt::{aggregate_metadata, prompt_hash, render_prompt, PromptTemplate};
pub use store::{ProfileTarget, TargetStore};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error("item index {0} has no catalog entry")]
    MissingCatalogEntry(usize),
    #[error("no profiles to encode")]
    NoProfiles,
    #[error("user `{0}` has an empty history")]
    EmptyHistory(String),
    #[error("invalid projection: {0}")]
    Projection(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target store: {0}")]
    Store(String),
    #[error("target store digest mismatch: recorded {recorded}, found {found}")]
    DigestMismatch { recorded: String, found: String },
    #[error("profile cache line {line}: {reason}")]
    Cache { line: usize, reason: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An LLM-written description of one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub text: String,
    pub prompt_hash: String,
    pub generator_id: String,
}
