use super::StepResult;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Environment {
    fn num_actions(&self) -> usize;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn observation(&self) -> Tensor<f32>;
    /// Start a new episode and return its first observation.
    fn reset(&mut self, seed: u64) -> Result<Tensor<f32>>;
}

/// Applies each action `k` times, summing rewards and returning the last
/// frame. Stops early on termination.
#[derive(Clone, Debug)]
pub struct ActionRepeat<E> {
    inner: E,
    k: usize,
    frames: u64,
}

impl<E: Environment> ActionRepeat<E> {
    pub fn new(inner: E, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("action repeat must be at least 1"));
        }
        Ok(ActionRepeat { inner, k, frames: 0 })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut E {
        &mut self.inner
    }

    pub fn into_inner(self) -> E {
        self.inner
    }

    pub fn repeat(&self) -> usize {
        self.k
    }

    /// Inner environment steps taken so far.
    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn set_frames(&mut self, frames: u64) {
        self.frames = frames;
    }
}

impl<E: Environment> Environment for ActionRepeat<E> {
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let mut reward = 0.0;
        let mut last = None;
        for _ in 0..self.k {
            let r = self.inner.step(action)?;
            self.frames += 1;
            reward += r.reward;
            let done = r.done;
            last = Some(r);
            if done {
                break;
            }
        }
        let mut out = last.expect("k >= 1");
        out.reward = reward;
        Ok(out)
    }

    fn observation(&self) -> Tensor<f32> {
        self.inner.observation()
    }

    fn reset(&mut self, seed: u64) -> Result<Tensor<f32>> {
        self.inner.reset(seed)
    }
}
