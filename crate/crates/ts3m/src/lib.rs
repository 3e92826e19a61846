//! Topic-routing selective state-space network.
//!
//! A two-branch classifier over token-embedding sequences: a content branch
//! (linear projection, then two 1-D convolutions with LeakyReLU, the second
//! strided to downsample) and a topic-state branch (its own projection+conv
//! stem feeding a discretized linear state-space scan). The branches are
//! fused by a sigmoid gate and pooled into a 1×P topic indicator token,
//! which also seeds an upsampled topic embedding prepended to the input
//! sequence for a downstream generator.
//!
//! Training minimizes a weighted sum of a next-sentence-prediction binary
//! cross-entropy and a taxonomy-aware topic loss whose cross-entropy term is
//! scaled by e^{−d} for the tree distance d between the true and predicted
//! topics. Adam with a cosine learning-rate schedule drives the updates;
//! everything is deterministic given the seed.

mod dims;
mod loss;
mod model;
mod params;
mod ssm;
mod train;

pub use dims::Dims;
pub use loss::{loss_nsp, loss_th, DistanceWeight};
pub use model::{Dropout, IndicatorGraph, ParamIds, TopicIndicator, Ts3m};
pub use params::{Checkpoint, Ts3mParams, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use ssm::{ssm_discretize, ssm_scan};
pub use train::{topic_accuracy, train, TrainConfig, TrainExample, TrainLogRecord, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Ts3mError {
    #[error(transparent)]
    Numerics(#[from] umami_numerics::NumericsError),
    #[error(transparent)]
    Topics(#[from] umami_topics::TopicError),
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("sequence of {got} tokens exceeds the {max}-token limit")]
    SequenceTooLong { got: usize, max: usize },
    #[error("unknown topic label '{0}'")]
    UnknownLabel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
