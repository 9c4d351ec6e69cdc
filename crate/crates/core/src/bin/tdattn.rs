use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use topdown_attention::agent::{load_checkpoint, Agent, StepOptions};
use topdown_attention::analysis::{
    default_script, injection_probe, render_overlay, saliency_map, threshold_sweep, what_where_image,
    what_where_report, AgentPolicy, Frame, RgbImage,
};
use topdown_attention::config::Config;
use topdown_attention::envs::SpriteWorld;
use topdown_attention::tensor::{ParamSet, Tensor};
use topdown_attention::training::{
    check_agent_gradients, evaluate, gradcheck_trajectory, jitter_biases, mean_and_stderr, random_policy_returns,
    run_episode, sampling_seed, EpisodeOptions, LossConfig, Mode, Trainer, AGENT_GRADCHECK_EPS, TRAINER_STATE_FILE,
};
use topdown_attention::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "tdattn", version, about = "Top-down spatial attention agent: training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent; writes metrics.jsonl and checkpoints under --out.
    Train(Common),
    /// Evaluate a checkpoint against the random-policy baseline.
    Eval(Common),
    /// Attention maps alpha-blended over frames, one image per head.
    AnalyzeOverlay(Common),
    /// Gaussian-blur perturbation saliency S_pi and S_V.
    AnalyzeSaliency(Common),
    /// What/where logit decomposition images.
    AnalyzeWhatwhere(Common),
    /// Score under hard-thresholded attention for each analysis threshold.
    SweepThreshold(Common),
    /// Twin runs with a sprite spliced into the observations only.
    InjectProbe(Common),
    /// Analytic vs central-difference gradients of the agent loss.
    Gradcheck(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `train.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for training or analysis episodes.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory to load (training resumes from it).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Actor threads for training, episode workers for evaluation.
    #[arg(long)]
    workers: Option<usize>,
    /// Alternate actor and learner on one thread (bit-reproducible).
    #[arg(long)]
    single_thread: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("Usage: tdattn <COMMAND> --config <PATH> [--set KEY=VALUE]... [--out DIR]");
            eprintln!("Run `tdattn --help` for the list of commands.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> CliResult<Config> {
    if !common.config.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", common.config.display())));
    }
    let mut config = Config::load(&common.config, &common.set).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("cannot read {}: {io}", common.config.display())),
        other => Failure::Usage(other.to_string()),
    })?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.analysis.seed = seed;
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Failure::Usage("--workers must be positive".into()));
        }
        config.train.actors = w;
    }
    Ok(config)
}

fn run(command: Command) -> CliResult<ExitCode> {
    match command {
        Command::Train(c) => train(&c),
        Command::Eval(c) => eval(&c),
        Command::AnalyzeOverlay(c) => overlay(&c),
        Command::AnalyzeSaliency(c) => saliency(&c),
        Command::AnalyzeWhatwhere(c) => whatwhere(&c),
        Command::SweepThreshold(c) => sweep(&c),
        Command::InjectProbe(c) => inject(&c),
        Command::Gradcheck(c) => return gradcheck(&c),
    }
    .map(|()| ExitCode::SUCCESS)
}

fn write_config(out: &Path, config: &Config) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), config.to_json_pretty()?)?;
    Ok(())
}

fn train(c: &Common) -> CliResult {
    let config = load_config(c)?;
    write_config(&c.out, &config)?;
    let mut trainer = match &c.checkpoint {
        Some(dir) if dir.join(TRAINER_STATE_FILE).is_file() => {
            info!("resuming from {}", dir.display());
            let mut t = Trainer::resume(dir)?;
            t.set_total_steps(config.train.total_steps);
            t
        }
        Some(dir) => return Err(Failure::Usage(format!("{} holds no trainer state", dir.display()))),
        None => Trainer::new(config.agent.clone(), config.env.clone(), config.train.clone())?,
    };
    let mode = if c.single_thread { Mode::SingleThread } else { Mode::Threaded };
    let summary = trainer.run(Some(&c.out), mode)?;
    println!(
        "learner_steps {} frames {} episodes {} mean_return {}",
        summary.learner_steps,
        summary.frames,
        summary.episodes,
        summary.mean_return.map_or("n/a".to_string(), |m| format!("{m:.4}"))
    );
    Ok(())
}

/// Agent plus parameters from `--checkpoint`, or freshly initialised ones.
fn load_agent(c: &Common, config: &Config) -> CliResult<(Agent, ParamSet<f32>)> {
    match &c.checkpoint {
        Some(dir) => {
            let (params, agent_config) = load_checkpoint(dir)?;
            if (agent_config.obs_height, agent_config.obs_width) != (config.env.height, config.env.width) {
                return Err(Failure::Runtime(Error::Config(format!(
                    "checkpoint expects {}x{} frames, env renders {}x{}",
                    agent_config.obs_height, agent_config.obs_width, config.env.height, config.env.width
                ))));
            }
            let agent = Agent::new(agent_config)?;
            Ok((agent, params))
        }
        None => {
            warn!("no --checkpoint given; using freshly initialised parameters");
            let agent = Agent::new(config.agent.clone())?;
            let params = agent.init_params(config.train.seed);
            Ok((agent, params))
        }
    }
}

fn episode_options(config: &Config, workers: Option<usize>) -> EpisodeOptions {
    EpisodeOptions {
        action_repeat: config.train.action_repeat,
        reward_clip: config.train.reward_clip,
        step: StepOptions::default(),
        max_agent_steps: config.analysis.max_agent_steps,
        workers: workers.unwrap_or(1),
    }
}

fn save_image(t: &Tensor<f32>, config: &Config, path_stem: &Path) -> Result<()> {
    let path = path_stem.with_extension(config.analysis.image_format.extension());
    RgbImage::from_tensor(t)?.scaled(config.analysis.image_scale.max(1)).save(&path)
}

fn eval(c: &Common) -> CliResult {
    let config = load_config(c)?;
    let (agent, params) = load_agent(c, &config)?;
    write_config(&c.out, &config)?;
    let options = episode_options(&config, c.workers);
    let episodes = config.analysis.episodes;
    let seed = config.analysis.seed;
    let scores = evaluate(&agent, &params, &config.env, episodes, seed, &options)?;
    let random = random_policy_returns(&config.env, episodes, config.train.action_repeat, seed)?;
    let (mean, stderr) = mean_and_stderr(&scores);
    let (rmean, rstderr) = mean_and_stderr(&random);
    let report = serde_json::json!({
        "episodes": episodes,
        "seed": seed,
        "mean_score": mean,
        "stderr": stderr,
        "scores": scores,
        "random_mean_score": rmean,
        "random_stderr": rstderr,
    });
    fs::write(c.out.join("eval.json"), serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n")?;
    println!("agent  {mean:.4} ± {stderr:.4} over {episodes} episodes");
    println!("random {rmean:.4} ± {rstderr:.4}");
    if config.analysis.dump_frames {
        let dir = c.out.join("frames");
        fs::create_dir_all(&dir)?;
        let world = SpriteWorld::new(&config.env, seed)?;
        let mut n = 0;
        run_episode(&agent, &params, world, sampling_seed(seed), &options, |rec| {
            save_image(rec.obs, &config, &dir.join(format!("frame_{:04}", rec.t)))?;
            n += 1;
            Ok(())
        })?;
        println!("wrote {n} frames to {}", dir.display());
    }
    Ok(())
}

fn overlay(c: &Common) -> CliResult {
    let config = load_config(c)?;
    let (agent, params) = load_agent(c, &config)?;
    let dir = c.out.join("overlay");
    fs::create_dir_all(&dir)?;
    let world = SpriteWorld::new(&config.env, config.analysis.seed)?;
    let mut written = 0;
    let limit = config.analysis.frames;
    run_episode(&agent, &params, world, config.analysis.seed, &episode_options(&config, None), |rec| {
        if rec.t >= limit {
            return Ok(());
        }
        let maps: Vec<Tensor<f32>> = rec.output.heads.iter().map(|h| h.map.clone()).collect();
        let frame = render_overlay(rec.obs, &maps, config.analysis.alpha)?;
        save_image(&frame.base, &config, &dir.join(format!("frame_{:04}", rec.t)))?;
        for (k, img) in frame.blended.iter().enumerate() {
            save_image(img, &config, &dir.join(format!("frame_{:04}_head{k}", rec.t)))?;
        }
        written += 1;
        Ok(())
    })?;
    println!("wrote {written} frames to {}", dir.display());
    Ok(())
}

fn saliency(c: &Common) -> CliResult {
    let config = load_config(c)?;
    let (agent, params) = load_agent(c, &config)?;
    let dir = c.out.join("saliency");
    fs::create_dir_all(&dir)?;
    let warm = config.analysis.warm_frames.max(1);
    let wanted = warm + config.analysis.frames;
    let mut frames = Vec::new();
    let mut prev_action = None;
    let mut prev_reward = 0.0;
    let clip = config.train.reward_clip;
    let world = SpriteWorld::new(&config.env, config.analysis.seed)?;
    let options = EpisodeOptions {
        max_agent_steps: wanted,
        ..episode_options(&config, None)
    };
    run_episode(&agent, &params, world, config.analysis.seed, &options, |rec| {
        frames.push(Frame {
            obs: rec.obs.clone(),
            prev_action,
            prev_reward,
        });
        prev_action = Some(rec.action);
        prev_reward = rec.reward.clamp(-clip, clip);
        Ok(())
    })?;
    if frames.len() < warm {
        return Err(Failure::Runtime(Error::InvalidArgument(format!(
            "episode ended after {} frames, fewer than warm_frames {warm}",
            frames.len()
        ))));
    }
    let policy = AgentPolicy { agent: &agent, params: &params };
    let mut csv = fs::File::create(dir.join("saliency.csv"))?;
    writeln!(csv, "frame,row,col,s_pi,s_v")?;
    let mut analysed = 0;
    for end in warm..=frames.len() {
        let pair = saliency_map(&policy, &frames[..end], config.analysis.probe)?;
        let t = end - 1;
        for (a, &r) in pair.rows.iter().enumerate() {
            for (b, &col) in pair.cols.iter().enumerate() {
                let i = a * pair.cols.len() + b;
                writeln!(csv, "{t},{r},{col},{},{}", pair.s_pi.data()[i], pair.s_v.data()[i])?;
            }
        }
        let obs = &frames[t].obs;
        save_image(obs, &config, &dir.join(format!("frame_{t:04}")))?;
        save_image(&green_overlay(obs, &pair.s_pi, &pair.rows, &pair.cols)?, &config, &dir.join(format!("frame_{t:04}_pi")))?;
        save_image(&green_overlay(obs, &pair.s_v, &pair.rows, &pair.cols)?, &config, &dir.join(format!("frame_{t:04}_v")))?;
        analysed += 1;
    }
    println!("analysed {analysed} frames into {}", dir.display());
    Ok(())
}

/// Saliency normalised to its maximum and added to the green channel.
fn green_overlay(obs: &Tensor<f32>, s: &Tensor<f32>, rows: &[usize], cols: &[usize]) -> Result<Tensor<f32>> {
    let (h, w) = (obs.shape()[0], obs.shape()[1]);
    let max = s.data().iter().copied().fold(0.0f32, f32::max);
    let mut out = obs.clone();
    if max <= 0.0 {
        return Ok(out);
    }
    for r in 0..h {
        let a = nearest(rows, r);
        for col in 0..w {
            let b = nearest(cols, col);
            let v = s.data()[a * cols.len() + b] / max;
            let g = &mut out.data_mut()[(r * w + col) * 3 + 1];
            *g = (*g + v).min(1.0);
        }
    }
    Ok(out)
}

fn nearest(grid: &[usize], p: usize) -> usize {
    grid.iter()
        .enumerate()
        .min_by_key(|(_, &g)| g.abs_diff(p))
        .map_or(0, |(i, _)| i)
}

fn whatwhere(c: &Common) -> CliResult {
    let config = load_config(c)?;
    let (agent, params) = load_agent(c, &config)?;
    let dir = c.out.join("whatwhere");
    fs::create_dir_all(&dir)?;
    let options = EpisodeOptions {
        max_agent_steps: config.analysis.frames.max(1),
        ..episode_options(&config, None)
    };
    let report = what_where_report(&agent, &params, &config.env, 1, config.analysis.seed, &options)?;
    for f in &report.frames {
        save_image(&f.obs, &config, &dir.join(format!("frame_{:04}", f.t)))?;
        for (k, m) in f.heads.iter().enumerate() {
            save_image(&what_where_image(&m.c)?, &config, &dir.join(format!("frame_{:04}_head{k}", f.t)))?;
        }
    }
    let mut text = format!("frames {}\nmax_abs_d {:.6}\n", report.frames.len(), report.max_abs_d);
    for (k, s) in report.mean_sign.iter().enumerate() {
        text.push_str(&format!("head {k} mean_sign {s:.6}\n"));
    }
    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sweep(c: &Common) -> CliResult {
    let config = load_config(c)?;
    let (agent, params) = load_agent(c, &config)?;
    fs::create_dir_all(&c.out)?;
    let report = threshold_sweep(
        &agent,
        &params,
        &config.env,
        &config.analysis.thresholds,
        config.analysis.episodes,
        config.analysis.seed,
        &episode_options(&config, c.workers),
    )?;
    let path = c.out.join("sweep.csv");
    report.write_csv(fs::File::create(&path)?)?;
    let mut stdout = std::io::stdout().lock();
    report.write_csv(&mut stdout)?;
    Ok(())
}

fn inject(c: &Common) -> CliResult {
    let config = load_config(c)?;
    let (agent, params) = load_agent(c, &config)?;
    fs::create_dir_all(&c.out)?;
    let script = if config.analysis.inject_script.is_empty() {
        default_script(&config.env)
    } else {
        config.analysis.inject_script.clone()
    };
    let report = injection_probe(
        &agent,
        &params,
        &config.env,
        &script,
        config.analysis.seed,
        &episode_options(&config, None),
    )?;
    let mut jsonl = fs::File::create(c.out.join("injection.jsonl"))?;
    for f in &report.frames {
        writeln!(jsonl, "{}", serde_json::to_string(f).map_err(Error::from)?)?;
    }
    let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    let text = format!(
        "frames {}\nrewards_identical {}\ntwins_identical {}\nmedian_sprite_mass {}\nmedian_control_mass {}\nmass_ratio {}\ndiverged_frames {}\n",
        report.frames.len(),
        report.rewards_identical,
        report.twins_identical,
        fmt(report.median_sprite_mass),
        fmt(report.median_control_mass),
        fmt(report.mass_ratio()),
        report.frames.iter().filter(|f| f.argmax_differs).count(),
    );
    fs::write(c.out.join("injection.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(c: &Common) -> CliResult<ExitCode> {
    let config = load_config(c)?;
    let agent = Agent::new(config.agent.clone())?;
    let params = jitter_biases(&agent.init_params(config.train.seed), 0.1, config.train.seed)?;
    let traj = gradcheck_trajectory(&agent, &params, 4, config.train.seed)?;
    let report = check_agent_gradients(&agent, &params, &traj, &LossConfig::from(&config.train), AGENT_GRADCHECK_EPS)?;
    println!(
        "max relative error {:.3e} ({}[{}], {} parameters)",
        report.max_relative_error, report.worst_param, report.worst_index, report.num_params
    );
    if report.max_relative_error < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::from(2))
    }
}
