//! Natural-language video moment grounding.
//!
//! Given a long video (as a sequence of precomputed snippet features) and a
//! textual query (as precomputed token features), the model localizes the
//! temporal window answering the query. The pipeline: an early-fusion
//! multi-modal transformer encoder, a multi-scale feature pyramid built by
//! stride-2 max-pooling, anchor-free classification/regression heads over
//! every pyramid level, soft-NMS decoding, and Recall@K@tIoU evaluation.
//! Training runs in two stages: pre-training on narration-derived windows,
//! then fine-tuning on annotated data with freshly initialized heads.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod training;

pub use error::{Error, Result};
