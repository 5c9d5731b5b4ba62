//! Blocking-based, cost-efficient retrieval-augmented entity matching.
//!
//! The pipeline runs in five phases:
//! 1. **Blocking** — group similar records across the source and target
//!    tables, generate within-block candidate pairs, deduplicate across
//!    blocks, and split oversized blocks ([`blocking`]).
//! 2. **Retrieval** — embed an aggregated per-block query and fetch the
//!    Top-k nearest entities/predicates from a knowledge-graph vector
//!    index by cosine similarity ([`retrieval`]).
//! 3. **Triple search** — expand retrieved seeds into graph triples via
//!    bounded-depth BFS or one-hop neighborhood expansion ([`kgsearch`]).
//! 4. **Enrichment & refinement** — resolve identifiers to
//!    `ID (description)` text and keep the Top-k ranked context items
//!    ([`kgsearch`]).
//! 5. **Generation** — build per-query or batched prompts, call a
//!    completion backend, and parse yes/no match decisions
//!    ([`generation`]).
//!
//! [`evaluation`] scores decisions against labeled pairs and accounts for
//! retrieval calls and per-stage latency; [`pipeline`] orchestrates the
//! eight run variants exposed by the CLI.

pub mod blocking;
pub mod config;
pub mod datamodel;
pub mod evaluation;
pub mod generation;
pub mod httputil;
pub mod kgsearch;
pub mod pipeline;
pub mod retrieval;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown record id: {0}")]
    UnknownRecord(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("load error in {file} line {line}: {message}")]
    Load {
        file: String,
        line: u64,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("http error: {0}")]
    Http(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
