//! Grounded genetic answer generation.
//!
//! Seed passages come from BM25 retrieval plus a rerank. An LLM-backed set of
//! genetic operators rewrites them, and an evolution loop keeps the
//! candidates with the best balance of query relevance and n-gram overlap
//! with the seeds. The [`evaluation`] module scores final answers for
//! grounding and for preference over the top retrieved passage.

pub mod corpus;
pub mod evaluation;
pub mod evolution;
pub mod fitness;
pub mod retrieval;
pub mod rewriter;
pub mod service;

pub use corpus::{Corpus, Document, Query, Tokenizer};
pub use evaluation::{evaluate_trace, EvalReport, GroundingVerifier, QueryEvaluation, ReportRow, Verdict};
pub use evolution::{evolve, EvolutionConfig, EvolutionError, EvolutionTrace, TerminationReason};
pub use fitness::{GroundingMode, GroundingReference, RelevanceScorer, RougeVariant};
pub use retrieval::{bm25_search, build_index, seed_population, Bm25Params, InvertedIndex, Seed};
pub use rewriter::{Candidate, GeneticOperators, Operator, RewriterBackend};
pub use service::{RetryPolicy, ServiceError, SidecarClient};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/grounding.md")]
    mod grounding {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    mod evolution {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
