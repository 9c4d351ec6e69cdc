//! The attention agent: vision core, query network, attention heads, answer
//! processor, policy core and output heads, with the two bottom-up
//! variants and checkpoint I/O.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_FORMAT};
pub use config::{AgentConfig, ConvSpec, ParamInit, ParamSpec, Variant};
pub use model::{
    init_params, AblationQueries, Agent, AgentState, StateNodes, StepInput, StepNodes, StepOptions, StepOutput,
};
