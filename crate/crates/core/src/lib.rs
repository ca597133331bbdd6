//! Unsupervised domain adaptation for CTC sequence recognizers.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: synthetic two-domain corpora and the on-disk dataset format.
//! - [`numcore`]: the context-window encoder, its heads, masking augmentation,
//!   the optimizer and a finite-difference gradient checker.
//! - [`ctc`]: CTC loss/gradient, greedy decoding and prefix beam search with
//!   n-gram shallow fusion.
//! - [`lm`]: character n-gram language model.
//! - [`metrics`]: edit distance and error rates.
//! - [`filtering`]: online/offline confidence, MC-dropout uncertainty and
//!   uncertainty-aware confidence filtering.
//! - [`pretrain`], [`online_pl`], [`offline_pl`]: the three training stages.
//! - [`pipeline`]: end-to-end orchestration, evaluation and reports.

pub mod corpus;
pub mod ctc;
pub mod error;
pub mod filtering;
pub mod lm;
pub mod metrics;
pub mod numcore;
pub mod offline_pl;
pub mod online_pl;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod training;

pub use error::{CastleError, Result};
