//! Collaborative semantic feature learning and label recovery for
//! multi-label recognition with incomplete labels.
//!
//! The crate trains and evaluates, end to end on synthetic data, a model
//! that couples two heads: a refined head built on semantically enhanced
//! patch features and supervised by the known labels only, and a coarse
//! max-pool head supervised by pseudo-labels recovered from the refined
//! predictions. Everything runs on a small in-crate reverse-mode autodiff
//! engine in double precision, so the whole loss graph is gradient-checked
//! against finite differences.
//!
//! Module map:
//! - [`autodiff`], [`gradcheck`]: the tape engine and its oracle.
//! - [`encoders`]: trainable patch encoder (one self-attention layer) and
//!   label embedding table.
//! - [`srfl`]: fusion of the pooled global feature with label embeddings
//!   into per-class semantic features.
//! - [`sgfe`]: low-rank bilinear attention mixing class semantics into each
//!   patch feature.
//! - [`recovery`]: location scores, region aggregation, coarse scores, and
//!   the pseudo-label fill.
//! - [`loss`]: asymmetric loss with hard, soft, and masked targets.
//! - [`data`]: synthetic dataset generation, label masking, JSONL I/O.
//! - [`model`]: parameter container and full forward graph assembly.
//! - [`optim`], [`trainer`]: decoupled-weight-decay optimizer, parameter
//!   EMA, the training loop, and experiment driver.
//! - [`eval`]: average precision, mAP, and label-recovery quality metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod recovery;
pub mod rng;
pub mod sgfe;
pub mod srfl;
pub mod trainer;

pub use error::{Error, Result};
