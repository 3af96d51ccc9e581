//! Toolkit for scoring how faithfully simulated therapy-patient conversations
//! reproduce real patient behaviour.
//!
//! A *setting* is one source of conversations (one simulator configuration, or
//! the real reference corpus). Each simulated setting is compared against the
//! reference along five dimensions:
//!
//! * narrative-stage progression (per-turn label distributions, JSD)
//! * emotion progression (same machinery, emotion labels)
//! * lexical diversity (MTLD distributions, 1-D Wasserstein)
//! * response length (log-ratio similarity of word counts)
//! * depression-marker usage (rate and prevalence differences)
//!
//! Scores land on a 0..=100 scale where 100 means indistinguishable from the
//! reference. The crate also ships annotation-agreement statistics (Cohen's
//! and Fleiss' kappa, percent agreement) for validating the turn classifiers.

pub mod agreement;
pub mod alignment;
pub mod classify;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod harness;
pub mod http;
pub mod lexical;
pub mod report;

/// Version string stamped into every output artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
