//! Calibration-free adaptation of EEG decoders.
//!
//! A decoder is pretrained on a population of subjects and then adapted
//! online to an unseen subject, one trial at a time. Two adaptation
//! mechanisms run inside the session loop: unsupervised alignment
//! ([`uda`]) re-centres each trial on a running covariance reference and
//! refreshes batch-norm statistics, and continual finetuning ([`cft`])
//! takes a few gradient steps on a sliding window of labelled trials after
//! each prediction.
//!
//! [`session`] owns the strict predict-then-reveal loop, [`runner`] expands
//! experiment plans into ablation and scaling suites, and [`report`] turns
//! result tables into CSV summaries and SVG charts.

pub mod bench;
pub mod cft;
pub mod data;
pub mod datagen;
pub mod error;
pub mod ingest;
pub mod models;
pub mod pretrain;
pub mod report;
pub mod runner;
pub mod seed;
pub mod session;
pub mod stats;
pub mod tensor;
pub mod uda;

pub use error::{Error, Result};
