//! Multi-agent trajectory forecasting: a graph-attention encoder over the
//! agents of each frame, a dilated causal TCN over the resulting sequence,
//! and a linear decoder back to positions. Everything runs on a small
//! tape-based reverse-mode autodiff engine in `f64`.
// NaN must fail range checks, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod serialize;
pub mod spatial;
pub mod tcn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{ModelConfig, PredictionTask, TrainedModel};
pub use tensor::Tensor;
