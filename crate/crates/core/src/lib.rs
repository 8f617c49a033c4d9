//! Bi-modal code-change representation learning and just-in-time defect
//! prediction.
//!
//! A commit is serialized as `[CLS] message ([ADD] line)* ([DEL] line)*`
//! and fed to a transformer encoder that is pre-trained with masked language
//! modeling and replaced message identification. The `[CLS]` vector is then
//! fused with 14 change-level expert metrics and fine-tuned as a defect
//! classifier.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod io;
pub mod nn;
pub mod par;
pub mod predict;
pub mod pretrain;
pub mod seeding;
pub mod synthetic;
pub mod tokenize;

pub use error::{Error, Result};
