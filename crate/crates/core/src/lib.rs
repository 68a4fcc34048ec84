//! Open-world semantic segmentation by region-aware metric learning.
//!
//! The crate covers uncertainty-driven region separation, region embeddings
//! trained with a circle loss, pixel anomaly scoring, meta-channel
//! aggregation for few-shot novel classes, and a small CPU network with
//! hand-written gradients that drives the whole pipeline end to end.

pub mod anomaly;
pub mod error;
pub mod fewshot_eval;
pub mod gradcheck;
pub mod mca;
pub mod metric_embedding;
pub mod optim;
pub mod pipeline;
pub mod region_separation;
pub mod tensor_io;
pub mod toynet;

pub use error::{Error, Result};
