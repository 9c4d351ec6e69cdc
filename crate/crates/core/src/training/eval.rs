use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rollout::{clip_reward, sample_action};
use crate::agent::{Agent, StepInput, StepOptions, StepOutput};
use crate::envs::{ActionRepeat, EnvSpec, Environment, SpriteWorld};
use crate::error::Result;
use crate::tensor::{ParamSet, Tensor};

/// What a per-step hook sees: the frame the agent acted on, its output and
/// the chosen action.
pub struct StepRecord<'a> {
    pub t: usize,
    pub obs: &'a Tensor<f32>,
    pub output: &'a StepOutput<f32>,
    pub action: usize,
    pub reward: f32,
    pub done: bool,
    pub world: &'a SpriteWorld,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOptions {
    pub action_repeat: usize,
    pub reward_clip: f32,
    pub step: StepOptions,
    /// Agent steps before the episode is cut (the env cap still applies).
    pub max_agent_steps: usize,
    /// Threads used by [`evaluate`]; results do not depend on it.
    pub workers: usize,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            action_repeat: 4,
            reward_clip: 1.0,
            step: StepOptions::default(),
            max_agent_steps: usize::MAX,
            workers: 1,
        }
    }
}

/// Play one episode from `world`, sampling actions with `sample_seed`.
/// Returns the unclipped score.
pub fn run_episode<F>(
    agent: &Agent,
    params: &ParamSet<f32>,
    world: SpriteWorld,
    sample_seed: u64,
    options: &EpisodeOptions,
    mut hook: F,
) -> Result<f64>
where
    F: FnMut(&StepRecord<'_>) -> Result<()>,
{
    let mut env = ActionRepeat::new(world, options.action_repeat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut state = agent.initial_state::<f32>();
    let mut obs = env.observation();
    let mut prev_action = None;
    let mut prev_reward = 0.0;
    let mut score = 0.0;
    for t in 0..options.max_agent_steps {
        let input = StepInput {
            obs: &obs,
            prev_action,
            prev_reward,
        };
        let out = agent.step(params, &input, &state, options.step)?;
        let action = sample_action(out.logits.data(), &mut rng);
        let result = env.step(action)?;
        score += result.reward as f64;
        hook(&StepRecord {
            t,
            obs: &obs,
            output: &out,
            action,
            reward: result.reward,
            done: result.done,
            world: env.inner(),
        })?;
        if result.done {
            break;
        }
        obs = result.observation;
        state = out.state;
        prev_action = Some(action);
        prev_reward = clip_reward(result.reward, options.reward_clip);
    }
    Ok(score)
}

/// Scores of `episodes` independent episodes; episode `i` uses world seed
/// `seed + i` and a sampling stream derived from it.
pub fn evaluate(
    agent: &Agent,
    params: &ParamSet<f32>,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<Vec<f64>> {
    evaluate_with_sampling(agent, params, spec, episodes, seed, seed, options)
}

/// Like [`evaluate`], but episode `i` samples actions from the stream of
/// `sampling_base + i` while the world still uses `seed + i`.
pub fn evaluate_with_sampling(
    agent: &Agent,
    params: &ParamSet<f32>,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    sampling_base: u64,
    options: &EpisodeOptions,
) -> Result<Vec<f64>> {
    let one = |i: u64| {
        let world = SpriteWorld::new(spec, seed.wrapping_add(i))?;
        run_episode(agent, params, world, sampling_seed(sampling_base.wrapping_add(i)), options, |_| Ok(()))
    };
    let workers = options.workers.clamp(1, episodes.max(1));
    if workers == 1 {
        return (0..episodes as u64).map(one).collect();
    }
    let chunks: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                scope.spawn(move || {
                    (0..episodes as u64)
                        .filter(|i| *i as usize % workers == w)
                        .map(one)
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..episodes).map(|i| chunks[i % workers][i / workers]).collect())
}

/// Action-sampling seed `evaluate` uses for the episode built from `seed`.
pub fn sampling_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Mean score of a uniformly random policy under the same action repeat.
pub fn random_policy_returns(spec: &EnvSpec, episodes: usize, action_repeat: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed(seed));
    (0..episodes as u64)
        .map(|i| {
            let mut env = ActionRepeat::new(SpriteWorld::new(spec, seed.wrapping_add(i))?, action_repeat)?;
            let num_actions = env.num_actions();
            let mut score = 0.0;
            loop {
                let r = env.step(rng.random_range(0..num_actions))?;
                score += r.reward as f64;
                if r.done {
                    break Ok(score);
                }
            }
        })
        .collect()
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
