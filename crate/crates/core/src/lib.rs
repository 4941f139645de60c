//! Explore-to-generalize reinforcement learning on procedural gridworlds.
//!
//! The crate trains a memory-equipped maximum-entropy exploration policy with a
//! k-nearest-neighbour intrinsic reward, trains an ensemble of reward-seeking
//! policies with PPO, and combines them at test time: the ensemble acts when
//! enough members agree, the exploration policy acts otherwise.

pub mod entropy;
pub mod env;
pub mod error;
pub mod policy;
pub mod ppo;
pub mod agent;
pub mod oracle;
pub mod metrics;
pub mod experiment;

pub use error::{Error, Result};
