//! Hallucination-preventive OMOP concept mapping.
//!
//! The crate wires a language model into OMOP vocabulary search through a
//! tool-calling protocol, then refuses to emit any concept the vocabulary
//! gateway cannot authenticate. The pieces:
//!
//! - [`vocabulary`]: concept records, identifiers, mapping results, and the
//!   strict output parser.
//! - [`athena`]: the vocabulary gateway (fixture or live backend) with
//!   caching and rate limiting.
//! - [`guard`]: post-hoc verification that a proposed mapping names a real
//!   concept, verbatim.
//! - [`preferences`]: vocabulary-preference profiles and candidate ranking.
//! - [`agent`]: the two-step mapping workflow (infer keyword, search, select,
//!   verify) over a pluggable model port.
//! - [`mcp`]: a stdio JSON-RPC server exposing the gateway as tools and
//!   reference resources.
//! - [`eval`]: batch outcome accounting, agreement matrices, and the paired
//!   signed-rank test.

pub mod agent;
pub mod athena;
pub mod eval;
pub mod guard;
pub mod mcp;
pub mod preferences;
pub mod vocabulary;

/// Compiles and runs every Rust snippet in the guide under `cargo test`, so
/// the book cannot drift from the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/concepts.md")]
    mod concepts {}
    #[doc = include_str!("../../../book/src/vocabulary-gateway.md")]
    mod vocabulary_gateway {}
    #[doc = include_str!("../../../book/src/grounding-guard.md")]
    mod grounding_guard {}
    #[doc = include_str!("../../../book/src/preferences.md")]
    mod preferences {}
    #[doc = include_str!("../../../book/src/mapping-agent.md")]
    mod mapping_agent {}
    #[doc = include_str!("../../../book/src/mcp-server.md")]
    mod mcp_server {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/signed-rank-test.md")]
    mod signed_rank_test {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
