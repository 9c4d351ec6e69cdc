use super::rollout::Trajectory;
use super::vtrace::{vtrace_targets, VTraceResult};
use super::TrainConfig;
use crate::agent::{Agent, StateNodes, StepInput, StepOptions};
use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Graph, NodeId, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub discount: f64,
    pub entropy_cost: f64,
    pub baseline_cost: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for LossConfig {
    fn from(c: &TrainConfig) -> Self {
        LossConfig {
            discount: c.discount,
            entropy_cost: c.entropy_cost,
            baseline_cost: c.baseline_cost,
            rho_bar: c.rho_bar,
            c_bar: c.c_bar,
        }
    }
}

/// Loss components, summed over steps (entropy is the per-step mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub baseline_loss: f64,
    pub entropy: f64,
    pub steps: usize,
}

impl LossStats {
    pub fn merge(&mut self, other: &LossStats) {
        let total = self.steps + other.steps;
        if total > 0 {
            self.entropy = (self.entropy * self.steps as f64 + other.entropy * other.steps as f64) / total as f64;
        }
        self.loss += other.loss;
        self.policy_loss += other.policy_loss;
        self.baseline_loss += other.baseline_loss;
        self.steps = total;
    }
}

/// Re-evaluated unroll, its v-trace targets and the recorded loss.
pub struct LearnerPass<T: Float> {
    pub graph: Graph<T>,
    pub loss: NodeId,
    pub vtrace: VTraceResult,
    pub stats: LossStats,
}

/// Re-run the unroll from its stored initial state and build the
/// actor-critic loss. V-trace quantities enter as constants.
pub fn learner_loss<T: Float>(
    agent: &Agent,
    params: &ParamSet<T>,
    traj: &Trajectory,
    cfg: &LossConfig,
) -> Result<LearnerPass<T>> {
    learner_loss_with(agent, params, traj, cfg, None)
}

/// As [`learner_loss`], optionally with v-trace targets supplied by the
/// caller instead of computed from this pass (finite-difference checks
/// need them fixed across perturbations).
pub fn learner_loss_with<T: Float>(
    agent: &Agent,
    params: &ParamSet<T>,
    traj: &Trajectory,
    cfg: &LossConfig,
    fixed: Option<&VTraceResult>,
) -> Result<LearnerPass<T>> {
    traj.validate()?;
    let t_len = traj.len();
    if t_len == 0 {
        return Err(Error::invalid("empty trajectory"));
    }
    let mut g = Graph::new();
    let mut state = StateNodes::constant(&mut g, &traj.initial_state.cast::<T>());
    let mut logits = Vec::with_capacity(t_len + 1);
    let mut values = Vec::with_capacity(t_len + 1);
    for t in 0..=t_len {
        if t > 0 && traj.dones[t - 1] {
            state = StateNodes::constant(&mut g, &agent.initial_state::<T>());
        }
        let input = StepInput {
            obs: &traj.observations[t],
            prev_action: traj.prev_actions[t],
            prev_reward: traj.prev_rewards[t],
        };
        let out = agent.step_on_graph(&mut g, params, &input, state, StepOptions::default())?;
        logits.push(out.logits);
        values.push(out.value);
        state = out.state;
    }

    let target_logits: Vec<Tensor<f32>> = logits[..t_len].iter().map(|&l| g.value(l).cast()).collect();
    let target_values: Vec<f64> = values.iter().map(|&v| g.value(v).data()[0].as_f64()).collect();
    let vt = match fixed {
        Some(v) if v.vs.len() == t_len && v.pg_advantages.len() == t_len => v.clone(),
        Some(v) => {
            return Err(Error::shape(
                "learner_loss",
                format!("fixed v-trace has {} steps, trajectory {t_len}", v.vs.len()),
            ))
        }
        None => vtrace_targets(
            &traj.behavior_logits,
            &target_logits,
            &traj.actions,
            &traj.rewards,
            &traj.dones,
            &target_values,
            cfg.discount,
            cfg.rho_bar,
            cfg.c_bar,
        )?,
    };

    let num_actions = g.shape(logits[0])[0];
    let logp = log_softmax_rows(&mut g, &logits[..t_len])?;
    let probs = softmax_rows(&mut g, &logits[..t_len])?;

    let mut coef = vec![T::zero(); t_len * num_actions];
    for t in 0..t_len {
        coef[t * num_actions + traj.actions[t]] = T::of(-vt.pg_advantages[t]);
    }
    let coef = g.constant(Tensor::new(vec![t_len * num_actions], coef)?);
    let pg = g.mul(logp, coef)?;
    let pg = g.sum(pg);

    let neg_entropy = g.mul(probs, logp)?;
    let neg_entropy = g.sum(neg_entropy);

    let v = g.concat(&values[..t_len])?;
    let vs = g.constant(Tensor::from_f64(&[t_len], &vt.vs)?);
    let diff = g.sub(vs, v)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.sum(sq);
    let baseline = g.scale(sq, T::of(cfg.baseline_cost));

    let ent_term = g.scale(neg_entropy, T::of(cfg.entropy_cost));
    let loss = g.add(pg, baseline)?;
    let loss = g.add(loss, ent_term)?;

    let stats = LossStats {
        loss: g.value(loss).data()[0].as_f64(),
        policy_loss: g.value(pg).data()[0].as_f64(),
        baseline_loss: g.value(baseline).data()[0].as_f64(),
        entropy: -g.value(neg_entropy).data()[0].as_f64() / t_len as f64,
        steps: t_len,
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (policy {}, baseline {}, entropy {})",
            stats.policy_loss, stats.baseline_loss, stats.entropy
        )));
    }
    Ok(LearnerPass {
        graph: g,
        loss,
        vtrace: vt,
        stats,
    })
}

fn log_softmax_rows<T: Float>(g: &mut Graph<T>, rows: &[NodeId]) -> Result<NodeId> {
    let parts: Vec<NodeId> = rows.iter().map(|&r| g.log_softmax(r)).collect();
    g.concat(&parts)
}

fn softmax_rows<T: Float>(g: &mut Graph<T>, rows: &[NodeId]) -> Result<NodeId> {
    let parts: Vec<NodeId> = rows.iter().map(|&r| g.softmax(r)).collect();
    g.concat(&parts)
}

/// Summed gradients and loss statistics over a batch of trajectories.
pub fn batch_gradients(
    agent: &Agent,
    params: &ParamSet<f32>,
    batch: &[Trajectory],
    cfg: &LossConfig,
) -> Result<(Gradients<f32>, LossStats)> {
    let mut grads = Gradients::zeros_like(params);
    let mut stats = LossStats::default();
    for traj in batch {
        let pass = learner_loss(agent, params, traj, cfg)?;
        grads.accumulate(&pass.graph.backward(pass.loss, params)?)?;
        stats.merge(&pass.stats);
    }
    Ok((grads, stats))
}

/// Mean entropy in nats of softmax(logits).
pub fn entropy(logits: &[f64]) -> f64 {
    let lp = crate::tensor::log_softmax(logits);
    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
}
