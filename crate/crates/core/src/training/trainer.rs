use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, mean_and_stderr, EpisodeOptions};
use super::loss::{batch_gradients, LossConfig, LossStats};
use super::rollout::{Actor, Trajectory};
use super::TrainConfig;
use crate::agent::{load_checkpoint, save_checkpoint, Agent, AgentConfig, AgentState};
use crate::envs::{ActionRepeat, EnvSpec, SpriteWorld};
use crate::error::{Error, Result};
use crate::tensor::{clip_gradients, OptimizerState, ParamSet, RmsProp, Tensor, UpdateOutcome};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const TRAINER_STATE_FILE: &str = "trainer_state.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

type EnvActor = Actor<ActionRepeat<SpriteWorld>>;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub episodes: u64,
    pub mean_return: Option<f64>,
    pub policy_loss: f64,
    pub baseline_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerReport {
    pub step: u64,
    pub stats: LossStats,
    pub grad_norm: f64,
    pub outcome: UpdateOutcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Actors and learner alternate on the calling thread (bit-reproducible).
    SingleThread,
    /// One thread per actor feeding a bounded queue.
    Threaded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub learner_steps: u64,
    pub frames: u64,
    pub episodes: u64,
    /// Mean over the last `return_window` completed episodes.
    pub mean_return: Option<f64>,
    /// Every completed episode's return, in completion order.
    pub returns: Vec<f64>,
}

pub struct Trainer {
    agent: Agent,
    env_spec: EnvSpec,
    config: TrainConfig,
    params: ParamSet<f32>,
    opt_state: OptimizerState<f32>,
    actors: Vec<EnvActor>,
    learner_steps: u64,
    episodes: u64,
    recent: VecDeque<f64>,
    returns: Vec<f64>,
    next_actor: usize,
}

impl Trainer {
    pub fn new(agent_config: AgentConfig, env_spec: EnvSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let agent = Agent::new(agent_config)?;
        let params = agent.init_params(config.seed);
        let opt_state = OptimizerState::new(&params);
        let actors = (0..config.actors)
            .map(|i| {
                let world = SpriteWorld::new(&env_spec, 0)?;
                check_obs_shape(&agent, &world)?;
                let env = ActionRepeat::new(world, config.action_repeat)?;
                let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
                Actor::new(env, &agent, config.reward_clip, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            agent,
            env_spec,
            config,
            params,
            opt_state,
            actors,
            learner_steps: 0,
            episodes: 0,
            recent: VecDeque::new(),
            returns: Vec::new(),
            next_actor: 0,
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    pub fn learner_steps(&self) -> u64 {
        self.learner_steps
    }

    /// Environment frames consumed by all actors.
    pub fn frames(&self) -> u64 {
        self.actors.iter().map(|a| a.env.frames()).sum()
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn mean_return(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().sum::<f64>() / self.recent.len() as f64)
        }
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            learner_steps: self.learner_steps,
            frames: self.frames(),
            episodes: self.episodes,
            mean_return: self.mean_return(),
            returns: self.returns.clone(),
        }
    }

    fn record_returns(&mut self, returns: &[f64]) {
        for &r in returns {
            self.episodes += 1;
            self.returns.push(r);
            self.recent.push_back(r);
            if self.recent.len() > self.config.return_window {
                self.recent.pop_front();
            }
        }
    }

    /// Gradient step on a batch; advances the learner step counter.
    pub fn learn(&mut self, batch: &[Trajectory]) -> Result<LearnerReport> {
        for t in batch {
            self.record_returns(&t.episode_returns);
        }
        let (mut grads, stats) = batch_gradients(&self.agent, &self.params, batch, &LossConfig::from(&self.config))?;
        let grad_norm = grads.global_norm();
        clip_gradients(&mut grads, self.config.grad_clip as f32)?;
        let outcome = RmsProp::new(self.config.rmsprop()).update(&mut self.params, &grads, &mut self.opt_state)?;
        if outcome == UpdateOutcome::SkippedNonFinite {
            warn!("learner step {}: non-finite gradients, update skipped", self.learner_steps + 1);
        }
        self.learner_steps += 1;
        Ok(LearnerReport {
            step: self.learner_steps,
            stats,
            grad_norm,
            outcome,
        })
    }

    /// Collect one batch round-robin over the actors and learn from it.
    pub fn step_single(&mut self) -> Result<LearnerReport> {
        let mut batch = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let i = self.next_actor;
            self.next_actor = (self.next_actor + 1) % self.actors.len();
            batch.push(self.actors[i].collect(&self.agent, &self.params, self.config.unroll)?);
        }
        self.learn(&batch)
    }

    pub fn metrics_line(&self, report: &LearnerReport) -> MetricsLine {
        MetricsLine {
            step: report.step,
            episodes: self.episodes,
            mean_return: self.mean_return(),
            policy_loss: report.stats.policy_loss,
            baseline_loss: report.stats.baseline_loss,
            entropy: report.stats.entropy,
            grad_norm: report.grad_norm,
            lr: self.config.lr,
        }
    }

    fn done(&self) -> bool {
        self.frames() >= self.config.total_steps
    }

    /// Train until the frame budget is spent. With `out`, writes metrics,
    /// periodic checkpoints and a final checkpoint under it.
    pub fn run(&mut self, out: Option<&Path>, mode: Mode) -> Result<TrainSummary> {
        let mut sink = match out {
            Some(dir) => Some(OutputSink::open(dir, &self.config)?),
            None => None,
        };
        match mode {
            Mode::SingleThread => {
                while !self.done() {
                    let report = self.step_single()?;
                    self.after_step(&report, sink.as_mut())?;
                }
            }
            Mode::Threaded => self.run_threaded(sink.as_mut())?,
        }
        if let Some(s) = sink.as_mut() {
            s.flush()?;
            self.save(&s.dir.join(FINAL_CHECKPOINT))?;
        }
        info!(
            "finished: {} learner steps, {} frames, {} episodes, mean return {:?}",
            self.learner_steps,
            self.frames(),
            self.episodes,
            self.mean_return()
        );
        Ok(self.summary())
    }

    fn after_step(&mut self, report: &LearnerReport, sink: Option<&mut OutputSink>) -> Result<()> {
        let step = report.step;
        let Some(sink) = sink else { return Ok(()) };
        if self.config.log_every > 0 && step % self.config.log_every == 0 {
            let line = self.metrics_line(report);
            sink.write_metrics(&line)?;
            info!(
                "step {step} frames {} episodes {} mean_return {:?} loss {:.4}",
                self.frames(),
                self.episodes,
                line.mean_return,
                report.stats.loss
            );
        }
        if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
            sink.flush()?;
            self.save(&sink.dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}")))?;
        }
        if self.config.eval_every > 0 && step % self.config.eval_every == 0 {
            let options = EpisodeOptions {
                action_repeat: self.config.action_repeat,
                reward_clip: self.config.reward_clip,
                ..EpisodeOptions::default()
            };
            let scores = evaluate(
                &self.agent,
                &self.params,
                &self.env_spec,
                self.config.eval_episodes,
                self.config.seed.wrapping_add(1 << 32),
                &options,
            )?;
            let (mean, stderr) = mean_and_stderr(&scores);
            sink.write_eval(step, mean, stderr, scores.len())?;
        }
        Ok(())
    }

    fn run_threaded(&mut self, mut sink: Option<&mut OutputSink>) -> Result<()> {
        let snapshot = Arc::new(RwLock::new(Arc::new(self.params.clone())));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = sync_channel::<Result<(usize, Trajectory, u64)>>(self.config.queue_capacity);
        let actors = std::mem::take(&mut self.actors);
        let mut handles = Vec::with_capacity(actors.len());
        for (i, mut actor) in actors.into_iter().enumerate() {
            let tx = tx.clone();
            let snapshot = Arc::clone(&snapshot);
            let stop = Arc::clone(&stop);
            let agent = self.agent.clone();
            let unroll = self.config.unroll;
            handles.push(thread::spawn(move || {
                while !stop.load(Ordering::Acquire) {
                    let params = Arc::clone(&snapshot.read().expect("snapshot lock"));
                    let result = actor.collect(&agent, &params, unroll).map(|t| (i, t, actor.env.frames()));
                    let failed = result.is_err();
                    if tx.send(result).is_err() || failed {
                        break;
                    }
                }
                actor
            }));
        }
        drop(tx);

        let mut frames = vec![0u64; handles.len()];
        let mut outcome = Ok(());
        'outer: while frames.iter().sum::<u64>() < self.config.total_steps {
            let mut batch = Vec::with_capacity(self.config.batch);
            while batch.len() < self.config.batch {
                match rx.recv_timeout(Duration::from_secs(30)) {
                    Ok(Ok((i, traj, f))) => {
                        frames[i] = f;
                        batch.push(traj);
                    }
                    Ok(Err(e)) => {
                        outcome = Err(e);
                        break 'outer;
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        warn!("learner starved: no trajectory for 30 s ({} of {} queued)", batch.len(), self.config.batch);
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        outcome = Err(Error::invalid("all actors exited"));
                        break 'outer;
                    }
                }
            }
            let report = match self.learn(&batch) {
                Ok(r) => r,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            *snapshot.write().expect("snapshot lock") = Arc::new(self.params.clone());
            if let Err(e) = self.after_step_threaded(&report, sink.as_deref_mut(), frames.iter().sum()) {
                outcome = Err(e);
                break;
            }
        }
        stop.store(true, Ordering::Release);
        // Unblock actors waiting on a full queue, then drop what they sent.
        drop(rx);
        for h in handles {
            let actor = h.join().map_err(|_| Error::invalid("actor thread panicked"))?;
            self.actors.push(actor);
        }
        outcome
    }

    fn after_step_threaded(&mut self, report: &LearnerReport, sink: Option<&mut OutputSink>, frames: u64) -> Result<()> {
        let Some(sink) = sink else { return Ok(()) };
        if self.config.log_every > 0 && report.step % self.config.log_every == 0 {
            let line = self.metrics_line(report);
            sink.write_metrics(&line)?;
            info!("step {} frames {frames} episodes {} mean_return {:?}", report.step, self.episodes, line.mean_return);
        }
        if self.config.checkpoint_every > 0 && report.step % self.config.checkpoint_every == 0 {
            sink.flush()?;
            let dir = sink.dir.join(CHECKPOINT_DIR).join(format!("step-{:08}", report.step));
            save_checkpoint(&self.params, self.agent.config(), &dir)?;
        }
        Ok(())
    }

    /// Agent checkpoint plus everything needed to resume training.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.params, self.agent.config(), dir)?;
        let state = TrainerState {
            train: self.config.clone(),
            env: self.env_spec.clone(),
            learner_steps: self.learner_steps,
            episodes: self.episodes,
            next_actor: self.next_actor,
            recent: self.recent.iter().copied().collect(),
            returns: self.returns.clone(),
            optimizer: self
                .opt_state
                .iter()
                .map(|(name, ms, mom)| OptimizerEntry {
                    name: name.to_string(),
                    mean_square: TensorBits::from(ms),
                    momentum: TensorBits::from(mom),
                })
                .collect(),
            actors: self.actors.iter().map(ActorState::from).collect(),
        };
        let mut text = serde_json::to_string(&state)?;
        text.push('\n');
        fs::write(dir.join(TRAINER_STATE_FILE), text)?;
        Ok(())
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let (params, agent_config) = load_checkpoint(dir)?;
        let text = fs::read_to_string(dir.join(TRAINER_STATE_FILE))?;
        let state: TrainerState = serde_json::from_str(&text)?;
        state.train.validate()?;
        let agent = Agent::new(agent_config)?;
        let mut opt_state = OptimizerState::new(&params);
        for e in state.optimizer {
            opt_state.restore(&e.name, e.mean_square.to_tensor()?, e.momentum.to_tensor()?)?;
        }
        let actors = state
            .actors
            .into_iter()
            .map(|a| a.into_actor(state.train.action_repeat, state.train.reward_clip))
            .collect::<Result<Vec<_>>>()?;
        if actors.len() != state.train.actors {
            return Err(Error::Config(format!(
                "trainer state has {} actors, config says {}",
                actors.len(),
                state.train.actors
            )));
        }
        Ok(Trainer {
            agent,
            env_spec: state.env,
            config: state.train,
            params,
            opt_state,
            actors,
            learner_steps: state.learner_steps,
            episodes: state.episodes,
            recent: state.recent.into(),
            returns: state.returns,
            next_actor: state.next_actor,
        })
    }

    /// Change the frame budget, e.g. to continue a resumed run.
    pub fn set_total_steps(&mut self, total: u64) {
        self.config.total_steps = total;
    }
}

fn check_obs_shape(agent: &Agent, world: &SpriteWorld) -> Result<()> {
    let cfg = agent.config();
    if (cfg.obs_height, cfg.obs_width, cfg.obs_channels) != (world.height(), world.width(), 3) {
        return Err(Error::Config(format!(
            "agent expects {}x{}x{} observations, env renders {}x{}x3",
            cfg.obs_height,
            cfg.obs_width,
            cfg.obs_channels,
            world.height(),
            world.width()
        )));
    }
    Ok(())
}

struct OutputSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    eval: Option<BufWriter<File>>,
}

impl OutputSink {
    fn open(dir: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(METRICS_FILE))?;
        let eval = if config.eval_every > 0 {
            Some(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(dir.join(EVAL_FILE))?,
            ))
        } else {
            None
        };
        Ok(OutputSink {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(metrics),
            eval,
        })
    }

    fn write_metrics(&mut self, line: &MetricsLine) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, line)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn write_eval(&mut self, step: u64, mean: f64, stderr: f64, episodes: usize) -> Result<()> {
        if let Some(w) = self.eval.as_mut() {
            let v = serde_json::json!({ "step": step, "mean_score": mean, "stderr": stderr, "episodes": episodes });
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        if let Some(w) = self.eval.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Tensor stored as raw f32 bit patterns so JSON round trips are exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorBits {
    shape: Vec<usize>,
    bits: Vec<u32>,
}

impl From<&Tensor<f32>> for TensorBits {
    fn from(t: &Tensor<f32>) -> Self {
        TensorBits {
            shape: t.shape().to_vec(),
            bits: t.data().iter().map(|v| v.to_bits()).collect(),
        }
    }
}

impl TensorBits {
    fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(self.shape.clone(), self.bits.iter().map(|&b| f32::from_bits(b)).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    name: String,
    mean_square: TensorBits,
    momentum: TensorBits,
}

#[derive(Serialize, Deserialize)]
struct ActorState {
    world: SpriteWorld,
    frames: u64,
    rng: ChaCha8Rng,
    state: [TensorBits; 4],
    prev_action: Option<usize>,
    prev_reward: u32,
    episode_return: u64,
    reward_clip: u32,
}

impl From<&EnvActor> for ActorState {
    fn from(a: &EnvActor) -> Self {
        ActorState {
            world: a.env.inner().clone(),
            frames: a.env.frames(),
            rng: a.rng.clone(),
            state: [
                TensorBits::from(&a.state.vis_h),
                TensorBits::from(&a.state.vis_c),
                TensorBits::from(&a.state.lstm_h),
                TensorBits::from(&a.state.lstm_c),
            ],
            prev_action: a.prev_action,
            prev_reward: a.prev_reward.to_bits(),
            episode_return: a.episode_return.to_bits(),
            reward_clip: a.reward_clip.to_bits(),
        }
    }
}

impl ActorState {
    fn into_actor(self, action_repeat: usize, reward_clip: f32) -> Result<EnvActor> {
        let obs = self.world.render();
        let mut env = ActionRepeat::new(self.world, action_repeat)?;
        env.set_frames(self.frames);
        let [vis_h, vis_c, lstm_h, lstm_c] = self.state;
        let stored_clip = f32::from_bits(self.reward_clip);
        if stored_clip != reward_clip {
            warn!("actor reward clip {stored_clip} differs from config {reward_clip}; using config");
        }
        Ok(Actor {
            env,
            rng: self.rng,
            state: AgentState {
                vis_h: vis_h.to_tensor()?,
                vis_c: vis_c.to_tensor()?,
                lstm_h: lstm_h.to_tensor()?,
                lstm_c: lstm_c.to_tensor()?,
            },
            obs,
            prev_action: self.prev_action,
            prev_reward: f32::from_bits(self.prev_reward),
            episode_return: f64::from_bits(self.episode_return),
            reward_clip,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    train: TrainConfig,
    env: EnvSpec,
    learner_steps: u64,
    episodes: u64,
    next_actor: usize,
    recent: Vec<f64>,
    returns: Vec<f64>,
    optimizer: Vec<OptimizerEntry>,
    actors: Vec<ActorState>,
}

/// Read every line of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
