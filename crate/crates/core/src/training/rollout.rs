use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentState, StepInput, StepOptions};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::tensor::{softmax, ParamSet, Tensor};

pub fn clip_reward(r: f32, bound: f32) -> f32 {
    r.clamp(-bound, bound)
}

/// One unroll of experience.
///
/// Step `t` consumes `observations[t]`, `prev_actions[t]`, `prev_rewards[t]`
/// and the recurrent state carried from step `t - 1` (reset to zeros when
/// `dones[t - 1]`). Index `T` of the per-input vectors is the bootstrap step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Tensor<f32>>,
    pub prev_actions: Vec<Option<usize>>,
    pub prev_rewards: Vec<f32>,
    pub actions: Vec<usize>,
    /// Clipped rewards.
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub behavior_logits: Vec<Tensor<f32>>,
    pub behavior_values: Vec<f32>,
    pub initial_state: AgentState<f32>,
    /// Unclipped returns of episodes that finished during this unroll.
    pub episode_returns: Vec<f64>,
    /// Parameter version the actor acted with.
    pub params_version: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let ok = self.observations.len() == t + 1
            && self.prev_actions.len() == t + 1
            && self.prev_rewards.len() == t + 1
            && self.rewards.len() == t
            && self.dones.len() == t
            && self.behavior_logits.len() == t
            && self.behavior_values.len() == t;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("trajectory", format!("inconsistent lengths for T = {t}")))
        }
    }
}

/// Draw an index from softmax(logits) with a single uniform variate.
pub fn sample_action(logits: &[f32], rng: &mut impl Rng) -> usize {
    let probs = softmax(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// An environment plus everything needed to continue acting in it across
/// unroll boundaries.
#[derive(Clone, Debug)]
pub struct Actor<E> {
    pub(crate) env: E,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) state: AgentState<f32>,
    pub(crate) obs: Tensor<f32>,
    pub(crate) prev_action: Option<usize>,
    pub(crate) prev_reward: f32,
    pub(crate) episode_return: f64,
    pub(crate) reward_clip: f32,
}

impl<E: Environment> Actor<E> {
    pub fn new(mut env: E, agent: &Agent, reward_clip: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = env.reset(rng.next_u64())?;
        Ok(Actor {
            env,
            rng,
            state: agent.initial_state(),
            obs,
            prev_action: None,
            prev_reward: 0.0,
            episode_return: 0.0,
            reward_clip,
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn state(&self) -> &AgentState<f32> {
        &self.state
    }

    /// Act for `unroll` steps by sampling from the policy.
    pub fn collect(&mut self, agent: &Agent, params: &ParamSet<f32>, unroll: usize) -> Result<Trajectory> {
        let mut traj = Trajectory {
            observations: Vec::with_capacity(unroll + 1),
            prev_actions: Vec::with_capacity(unroll + 1),
            prev_rewards: Vec::with_capacity(unroll + 1),
            actions: Vec::with_capacity(unroll),
            rewards: Vec::with_capacity(unroll),
            dones: Vec::with_capacity(unroll),
            behavior_logits: Vec::with_capacity(unroll),
            behavior_values: Vec::with_capacity(unroll),
            initial_state: self.state.clone(),
            episode_returns: Vec::new(),
            params_version: params.version(),
        };
        for _ in 0..unroll {
            traj.observations.push(self.obs.clone());
            traj.prev_actions.push(self.prev_action);
            traj.prev_rewards.push(self.prev_reward);
            let input = StepInput {
                obs: &self.obs,
                prev_action: self.prev_action,
                prev_reward: self.prev_reward,
            };
            let out = agent.step(params, &input, &self.state, StepOptions::default())?;
            if !out.logits.is_finite() {
                return Err(Error::NonFinite("behaviour logits".into()));
            }
            let action = sample_action(out.logits.data(), &mut self.rng);
            let result = self.env.step(action)?;
            let reward = clip_reward(result.reward, self.reward_clip);
            self.episode_return += result.reward as f64;

            traj.actions.push(action);
            traj.rewards.push(reward);
            traj.dones.push(result.done);
            traj.behavior_logits.push(out.logits);
            traj.behavior_values.push(out.value);

            if result.done {
                traj.episode_returns.push(self.episode_return);
                self.episode_return = 0.0;
                self.obs = self.env.reset(self.rng.next_u64())?;
                self.state = agent.initial_state();
                self.prev_action = None;
                self.prev_reward = 0.0;
            } else {
                self.obs = result.observation;
                self.state = out.state;
                self.prev_action = Some(action);
                self.prev_reward = reward;
            }
        }
        traj.observations.push(self.obs.clone());
        traj.prev_actions.push(self.prev_action);
        traj.prev_rewards.push(self.prev_reward);
        Ok(traj)
    }
}

/// Single-shot collection with a fresh actor.
pub fn collect_trajectory<E: Environment>(
    agent: &Agent,
    env: E,
    unroll: usize,
    params: &ParamSet<f32>,
    seed: u64,
) -> Result<Trajectory> {
    Actor::new(env, agent, 1.0, seed)?.collect(agent, params, unroll)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_reward_examples() {
        assert_eq!(clip_reward(3.0, 1.0), 1.0);
        assert_eq!(clip_reward(-0.5, 1.0), -0.5);
        assert_eq!(clip_reward(-1.0, 1.0), -1.0);
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.0f32, (3.0f32).ln()];
        let n = 20_000;
        let ones = (0..n).filter(|_| sample_action(&logits, &mut rng) == 1).count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.02, "{frac}");
    }
}
