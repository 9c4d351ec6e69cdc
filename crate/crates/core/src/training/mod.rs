//! Actor-critic training with v-trace targets.

mod config;
mod eval;
mod gradcheck;
mod loss;
mod rollout;
mod trainer;
mod vtrace;

pub use config::TrainConfig;
pub use eval::{evaluate, evaluate_with_sampling, mean_and_stderr, random_policy_returns, run_episode, sampling_seed, EpisodeOptions, StepRecord};
pub use gradcheck::{check_agent_gradients, env_for, gradcheck_trajectory, jitter_biases, GradcheckReport, AGENT_GRADCHECK_EPS};
pub use loss::{batch_gradients, entropy, learner_loss, learner_loss_with, LearnerPass, LossConfig, LossStats};
pub use rollout::{clip_reward, collect_trajectory, sample_action, Actor, Trajectory};
pub use trainer::{
    read_metrics, LearnerReport, MetricsLine, Mode, TrainSummary, Trainer, CHECKPOINT_DIR, EVAL_FILE,
    FINAL_CHECKPOINT, METRICS_FILE, TRAINER_STATE_FILE,
};
pub use vtrace::{vtrace_from_log_rhos, vtrace_targets, VTraceResult};
