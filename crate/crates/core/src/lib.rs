//! Soft, top-down, multi-head spatial attention agent: model, actor-critic
//! training on sprite-world environments, and interpretability analysis.

pub mod agent;
pub mod analysis;
pub mod attention;
pub mod config;
pub mod envs;
pub mod error;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
