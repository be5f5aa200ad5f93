//! A small, dependency-light library for generalized and incremental
//! few-shot learning over vector-feature datasets.
//!
//! The pipeline has three phases: base-class pretraining, calibrated
//! novel-class learning (base-normalized cross-entropy plus a squared-L2
//! pull toward the pretrained backbone), and balanced-replay fine-tuning
//! over the joint label space. Everything is built on a plain row-major
//! `f64` matrix type with hand-written backpropagation, checked against a
//! central finite-difference oracle.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod phases;
pub mod protocol;
pub mod report;

pub use error::{Error, Result};
