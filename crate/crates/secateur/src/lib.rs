//! Desk-scale laboratory for reinforcement-learned channel pruning.
//!
//! Small convolutional networks are trained jointly with one learnable
//! gate agent per channel. Each agent holds a single weight; its sigmoid
//! is the probability of keeping the channel, sampled as a Bernoulli mask
//! on every forward pass. A score-function gradient on a compression-times-
//! accuracy reward moves the weights, after which low-probability channels
//! are physically removed and the survivor network is fine-tuned. Trained
//! agent weights double as a channel-importance ranking for searching
//! compressed architectures under memory or FLOPs budgets.

pub mod agent;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod ops;
pub mod prune;
pub mod reward;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamState, Tensor};
