//! mechpilot: a desk-scale workbench for reproducible mechanistic-evidence
//! audits of model-behavior claims.
//!
//! The crate plants known behaviors in tiny transformers, runs three
//! mechanistic evidence lines (linear probe, activation patching,
//! before/after-training comparison) against a machine-decidable claim,
//! gates them on pre-registered floors under a metered compute budget,
//! reproduces every line deterministically from content-addressed
//! inputs, and publishes a structured verifier report whatever the
//! outcome.
//!
//! See the `book/` guide for the concepts; the [`pilot`] module for the
//! end-to-end orchestration; and the `mechpilot` CLI for the command
//! surface.

pub mod audit;
pub mod canon;
pub mod claims;
pub mod data;
pub mod evidence;
pub mod matrix;
pub mod model;
pub mod pilot;
pub mod registry;
pub mod store;
pub mod tokens;
pub mod train;
pub mod workbench;

pub use canon::Digest;
