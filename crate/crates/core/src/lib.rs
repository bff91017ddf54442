//! Phishing page detection from HTML alone.
//!
//! The pipeline: a labeled corpus ([`corpus`]) is turned into numeric and
//! textual features ([`extractor`]); the eleven numeric features feed a
//! tabular MLP ([`tabnet`]) whose 16-dim embedding is concatenated with
//! hashed title and content embeddings ([`encoders`]) and classified by a
//! linear head trained end to end ([`fusion`]).

pub mod corpus;
pub mod dom;
pub mod domain;
pub mod encoders;
pub mod error;
pub mod extractor;
pub mod fusion;
pub mod harvester;
pub mod metrics;
pub mod optim;
pub mod real;
pub mod synth;
pub mod tabnet;

pub use corpus::{Label, LabeledDocument};
pub use error::{CheckpointError, Error, Result};
