//! Deterministic sprite-world environments.

mod sprite;
mod world;
mod wrappers;

pub use sprite::{
    Sprite, SpriteKind, COLLECTIBLE_COLOR, ENEMY_COLOR, KIND_PALETTE, PLAYER_COLOR, PROJECTILE_COLOR,
};
pub use world::{render_sprites, reset, EnvSpec, Rules, SpriteWorld};
pub use wrappers::{ActionRepeat, Environment};

use crate::tensor::Tensor;

/// 0 no-op, 1 up, 2 down, 3 left, 4 right.
pub const NUM_ACTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// H×W×3 in [0, 1].
    pub observation: Tensor<f32>,
    pub reward: f32,
    pub done: bool,
}
