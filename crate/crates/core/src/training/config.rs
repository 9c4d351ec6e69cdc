use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RmsPropConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub discount: f64,
    pub entropy_cost: f64,
    pub baseline_cost: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub rmsprop_momentum: f64,
    pub unroll: usize,
    pub batch: usize,
    /// Rewards are clipped to `[-reward_clip, reward_clip]`.
    pub reward_clip: f32,
    /// Per-element gradient bound.
    pub grad_clip: f64,
    pub action_repeat: usize,
    /// Budget in environment frames (inner steps, before action repeat).
    pub total_steps: u64,
    pub actors: usize,
    /// Trajectories buffered between actors and learner in threaded mode.
    pub queue_capacity: usize,
    pub rho_bar: f64,
    pub c_bar: f64,
    /// Learner steps between metrics lines; 0 disables logging.
    pub log_every: u64,
    /// Learner steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Learner steps between evaluation runs; 0 disables evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Completed episodes averaged into `mean_return`.
    pub return_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            discount: 0.99,
            entropy_cost: 0.01,
            baseline_cost: 0.5,
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 0.01,
            rmsprop_momentum: 0.0,
            unroll: 50,
            batch: 32,
            reward_clip: 1.0,
            grad_clip: 1280.0,
            action_repeat: 4,
            total_steps: 200_000,
            actors: 4,
            queue_capacity: 8,
            rho_bar: 1.0,
            c_bar: 1.0,
            log_every: 10,
            checkpoint_every: 0,
            eval_every: 0,
            eval_episodes: 10,
            return_window: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the 40×30 sprite worlds: short unrolls, small
    /// batches and a larger step size.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            discount: 0.99,
            rmsprop_epsilon: 1e-5,
            unroll: 20,
            batch: 4,
            ..Self::default()
        }
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr,
            decay: self.rmsprop_decay,
            epsilon: self.rmsprop_epsilon,
            momentum: self.rmsprop_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("rmsprop_epsilon", self.rmsprop_epsilon),
            ("reward_clip", self.reward_clip as f64),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("unroll", self.unroll),
            ("batch", self.batch),
            ("action_repeat", self.action_repeat),
            ("actors", self.actors),
            ("queue_capacity", self.queue_capacity),
            ("return_window", self.return_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config("train.discount must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(0.0..1.0).contains(&self.rmsprop_momentum) {
            return Err(Error::Config("train.rmsprop_decay and momentum must be in [0, 1)".into()));
        }
        if self.rho_bar < 1.0 || self.c_bar < 1.0 {
            return Err(Error::Config("train.rho_bar and c_bar must be at least 1".into()));
        }
        if self.entropy_cost < 0.0 || self.baseline_cost < 0.0 {
            return Err(Error::Config("train loss weights must be non-negative".into()));
        }
        Ok(())
    }
}
