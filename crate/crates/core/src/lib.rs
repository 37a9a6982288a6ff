//! Budget-constrained token-sparsity scheduling for cached diffusion
//! transformer sampling: toy model, token-wise feature cache, learnable cost
//! tensors, DP schedule solver, and the training/search machinery around them.

pub mod autodiff;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod diffexec;
pub mod dp;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selector;
pub mod trainer;

pub use error::{Error, Result};
