use super::loss::{learner_loss, learner_loss_with, LossConfig};
use super::rollout::{collect_trajectory, Trajectory};
use crate::agent::{Agent, AgentConfig};
use crate::envs::{ActionRepeat, EnvSpec, SpriteWorld};
use crate::error::Result;
use crate::tensor::{finite_diff_gradient, max_relative_error, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const AGENT_GRADCHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub num_params: usize,
}

/// Copy of `params` with every bias drawn uniformly from `±scale`.
pub fn jitter_biases(params: &ParamSet<f32>, scale: f32, seed: u64) -> Result<ParamSet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    let names: Vec<String> = params.names().filter(|n| n.ends_with("/b")).map(str::to_string).collect();
    for name in names {
        let t = params.get(&name)?;
        let data = t.data().iter().map(|_| rng.random_range(-scale..scale)).collect();
        out.set(&name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Collector environment whose frames match the agent's input size.
pub fn env_for(config: &AgentConfig) -> EnvSpec {
    let sprite = (config.obs_height.min(config.obs_width) / 6).max(2);
    EnvSpec {
        height: config.obs_height,
        width: config.obs_width,
        sprite_size: sprite,
        min_spawn_distance: 2.0 * sprite as f32,
        ..EnvSpec::collector()
    }
}

/// Trajectory of `unroll` steps from a sprite world sized for `config`.
pub fn gradcheck_trajectory(agent: &Agent, params: &ParamSet<f32>, unroll: usize, seed: u64) -> Result<Trajectory> {
    let env = ActionRepeat::new(SpriteWorld::new(&env_for(agent.config()), seed)?, 1)?;
    collect_trajectory(agent, env, unroll, params, seed)
}

/// Compare analytic and central-difference gradients of the full
/// actor-critic loss over `traj`, in f64, with v-trace targets held at
/// their unperturbed values.
pub fn check_agent_gradients(
    agent: &Agent,
    params: &ParamSet<f32>,
    traj: &Trajectory,
    cfg: &LossConfig,
    eps: f64,
) -> Result<GradcheckReport> {
    let p64: ParamSet<f64> = params.cast();
    let pass = learner_loss(agent, &p64, traj, cfg)?;
    let analytic = pass.graph.backward(pass.loss, &p64)?;
    let fixed = pass.vtrace;
    let numeric = finite_diff_gradient(
        |p| {
            let pass = learner_loss_with(agent, p, traj, cfg, Some(&fixed))?;
            Ok(pass.graph.value(pass.loss).data()[0])
        },
        &p64,
        eps,
    )?;
    let (err, name, idx) = max_relative_error(&analytic, &numeric)?;
    Ok(GradcheckReport {
        max_relative_error: err,
        worst_param: name,
        worst_index: idx,
        num_params: p64.num_scalars(),
    })
}
