//! Neural conditional random fields for sleep staging from a respiratory
//! flow signal: a residual 1D CNN feeds a GRU whose hidden states drive
//! either an independent softmax head or a linear-chain CRF with exact
//! inference.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cnn;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod gru;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod saliency;
pub mod training;

pub use error::{Error, Result};
