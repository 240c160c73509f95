//! Hybrid prior-case retrieval engine.
//!
//! A query judgment is reduced to the sentences carrying selected rhetorical
//! roles, then run through dense vector candidate retrieval, BM25 over the
//! candidate set, reciprocal rank fusion and a chunked pair-scorer re-rank.
//! The [`eval`] module scores the resulting runs against citation-derived
//! relevance judgments.
//!
//! Every model-backed stage sits behind a trait ([`vector::Embedder`],
//! [`rerank::PairScorer`], [`segmenter::RoleAnnotator`]) with a deterministic
//! in-process implementation, so the whole pipeline runs hermetically. The
//! [`protocol`] module provides the client for an external model service and
//! a stub server that speaks the same wire format.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod lexical;
pub mod pipeline;
pub mod protocol;
pub mod rerank;
pub mod segmenter;
pub mod vector;

pub use error::{Error, Result};
