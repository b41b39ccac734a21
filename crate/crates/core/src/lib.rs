//! Multi-instance-learning regression with masked hard instance mining.
//!
//! Bags of embedded instances are pooled by a BiLSTM + additive attention
//! regressor trained with MSE under AdamW. Training runs in two phases: a
//! plain donor model first, then a receiver trained while the donor's
//! high-attention instances (plus some random low-attention ones) are masked
//! out, which spreads the receiver's attention over more of the relevant
//! instances. The `metrics` module scores both prediction quality and
//! attention explainability (entropy, recall against relevance labels,
//! drop-top-k sensitivity).

pub mod data;
pub mod error;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use data::{Bag, Instance, SynthConfig};
pub use error::{Error, Result};
pub use mining::{AttentionRecord, MaskPlan, MhimConfig};
pub use model::{ModelConfig, ModelParams};
pub use pipeline::{FoldSpec, TrainConfig};
pub use tensor::{Tape, Tensor, Var};
