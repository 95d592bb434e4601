//! SynCPKL: synthesize commonsense-persona-knowledge-linking datasets from
//! persona-grounded dialogues, and train/evaluate linkers that decide
//! whether a (head, relation, tail) persona fact is relevant to a dialogue
//! window.
//!
//! The pipeline stages:
//!
//! 1. [`corpus`] — parse dialogues, personas, and fact triples; extract
//!    5-utterance windows centered on a target speaker's utterance.
//! 2. [`pairing`] — heuristic candidates: own-speaker facts as soft
//!    positives, other-speaker facts as soft negatives, with shared-fact
//!    collision handling.
//! 3. [`filter`] — pluggable relevance scorer, quantile threshold
//!    calibration, balanced soft labels.
//! 4. [`llm`] + [`labeler`] — chain-of-thought LLM annotation of head and
//!    tail relevance, with record/replay fixtures.
//! 5. [`dataset`] — head-variant, tail-variant, and AND-combined datasets
//!    with manifests, splits, and stats.
//! 6. [`trainer`] + [`eval`] — feature-configuration serialization, a
//!    pluggable classifier backend, F1/accuracy reports per relation.
//!
//! [`pipeline`] chains the stages from a single [`config`] file; the
//! `syncpkl` binary exposes them as subcommands.

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod filter;
pub mod labeler;
pub mod llm;
pub mod pairing;
pub mod pipeline;
pub mod trainer;
