//! vulnforge builds instruction-tuning data for code vulnerability models.
//!
//! The pipeline starts from a corpus of functions labeled vulnerable or not,
//! plus the security patches and CVE metadata that come with the vulnerable
//! ones. From a patch it recovers the deleted (vulnerable) lines, builds a
//! statement-level dependency graph to collect the surrounding context, and
//! feeds those features into a multi-turn self-verification conversation with
//! a chat model to produce a vetted interpretation of each vulnerability.
//! The corpus, features, and interpretations are then rendered into a
//! three-task instruction dataset (detection, localization, interpretation),
//! optionally augmented by identifier renaming. A separate attack suite
//! (Metropolis-Hastings renaming, word-importance renaming, dead-code
//! insertion) and an evaluation module measure how robust a trained model is
//! against semantics-preserving edits.
//!
//! Modules are usable on their own; the `vulnforge` CLI wires them into a
//! staged pipeline with a manifest and resumable intermediate artifacts.

pub mod attacks;
pub mod client;
pub mod corpus;
pub mod cotsv;
pub mod eval;
pub mod instruct;
pub mod lexer;
pub mod patch;
pub mod pdg;

mod book;
