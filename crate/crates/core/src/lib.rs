//! Counting-contrastive training lab for a tiny image/text dual encoder.
//!
//! The pipeline curates a counting training set from synthetic scenes by
//! checking spelled numbers in captions against detected object counts,
//! trains a dual encoder with a counterfactual counting loss next to the
//! usual contrastive loss, and evaluates it with nine-way zero-shot count
//! classification and count-aware retrieval.

pub mod cli;
pub mod config;
pub mod curation;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod loss;
pub mod numbers;
pub mod par;
pub mod pipeline;
pub mod scene;
pub mod seed;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
