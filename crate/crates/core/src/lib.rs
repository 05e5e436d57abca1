//! Pseudo-labeling and dataset curation engine for object detection.
//!
//! The engine builds open-vocabulary detection prompts from a class catalog,
//! merges and filters the boxes a detector returns, gates labels and generated
//! images through a multimodal reviewer, mixes generated and original data and
//! evaluates the resulting detector. Every model call goes through the wire
//! protocol in [`backends`], which also ships a deterministic synthetic world
//! so the whole pipeline runs without any model.

pub mod annotate;
pub mod backends;
pub mod catalog;
pub mod cli;
pub mod concurrency;
pub mod diversify;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod jsonl;
pub mod paths;
pub mod preprocess;
pub mod review;

pub use error::{Error, Result};
