//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line; the
//! test fails if any criterion does.
//!
//! The learning criteria train several toy agents and take a while; run with
//! `cargo test --release --test acceptance -- --nocapture` to watch.

use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topdown_attention::agent::{load_checkpoint, save_checkpoint, Agent, AgentConfig, ParamSpec, Variant};
use topdown_attention::analysis::{
    cell_of, default_script, injection_probe, threshold_sweep, what_where_report, AgentPolicy, Frame, ProbeSpec,
    WarmedProbe,
};
use topdown_attention::attention::{
    attend, attention_logits, concat_spatial, hard_threshold, marginal_distributions, spatial_softmax,
    split_keys_values, SpatialBasis,
};
use topdown_attention::envs::{EnvSpec, SpriteWorld, NUM_ACTIONS};
use topdown_attention::tensor::{ParamSet, Tensor};
use topdown_attention::training::{
    check_agent_gradients, env_for, gradcheck_trajectory, jitter_biases, random_policy_returns,
    run_episode, vtrace_from_log_rhos, EpisodeOptions, LossConfig, Mode, TrainConfig, Trainer,
    AGENT_GRADCHECK_EPS, FINAL_CHECKPOINT, METRICS_FILE,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOY_FRAMES: u64 = 200_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps: TOY_FRAMES,
        seed,
        ..TrainConfig::toy()
    }
}

/// Trains a toy agent single-threaded and returns (mean return over the last
/// 100 episodes, final parameters).
fn train_toy(variant: Variant, env: &EnvSpec, seed: u64) -> (f64, ParamSet<f32>) {
    let mut trainer = Trainer::new(AgentConfig::toy(NUM_ACTIONS, variant), env.clone(), toy_train_config(seed)).unwrap();
    while trainer.frames() < TOY_FRAMES {
        trainer.step_single().unwrap();
    }
    (trainer.mean_return().unwrap_or(0.0), trainer.params().clone())
}

fn episode_options(max_agent_steps: usize) -> EpisodeOptions {
    EpisodeOptions {
        max_agent_steps,
        ..EpisodeOptions::default()
    }
}

// 1 ------------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for variant in [Variant::TopDown, Variant::FixedQuery, Variant::L2NormKey] {
        let agent = Agent::new(AgentConfig::tiny(variant)).unwrap();
        let params = jitter_biases(&agent.init_params(7), 0.1, 11).unwrap();
        let traj = gradcheck_trajectory(&agent, &params, 4, 3).unwrap();
        let report = check_agent_gradients(&agent, &params, &traj, &LossConfig::default(), AGENT_GRADCHECK_EPS).unwrap();
        worst = worst.max(report.max_relative_error);
    }
    outcome(worst < 1e-3, format!("max relative error {worst:.2e} over three variants"))
}

// 2 ------------------------------------------------------------------------

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn math_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut attn_err = 0.0f64;
    let mut vtrace_err = 0.0f64;
    let instances = 120;
    for _ in 0..instances {
        let (h, w, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..7));
        let keys = random_tensor(&mut rng, &[h, w, c]);
        let values = random_tensor(&mut rng, &[h, w, c]);
        let q = random_tensor(&mut rng, &[c]);
        let at = |t: &Tensor<f64>, i: usize, j: usize, l: usize| t.data()[(i * w + j) * c + l];

        let logits = attention_logits(&q, &keys).unwrap();
        let mut z = 0.0;
        let mut brute = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let s: f64 = (0..c).map(|l| q.data()[l] * at(&keys, i, j, l)).sum();
                attn_err = attn_err.max((logits.data()[i * w + j] - s).abs());
                brute[i * w + j] = s.exp();
                z += s.exp();
            }
        }
        let map = spatial_softmax(&logits);
        let answer = attend(&map, &values).unwrap();
        for l in 0..c {
            let s: f64 = (0..h * w).map(|p| brute[p] / z * at(&values, p / w, p % w, l)).sum();
            attn_err = attn_err.max((answer.data()[l] - s).abs());
        }
        let (rows, cols) = marginal_distributions(&map).unwrap();
        for i in 0..h {
            let s: f64 = (0..w).map(|j| brute[i * w + j] / z).sum();
            attn_err = attn_err.max((rows[i] - s).abs());
        }
        for j in 0..w {
            let s: f64 = (0..h).map(|i| brute[i * w + j] / z).sum();
            attn_err = attn_err.max((cols[j] - s).abs());
        }

        let n = rng.random_range(1..10);
        let log_rhos: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let discounts: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { 0.95 }).collect();
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let got = vtrace_from_log_rhos(&log_rhos, &discounts, &rewards, &vals, boot, 1.0, 1.0).unwrap();
        let v = |t: usize| if t < n { vals[t] } else { boot };
        for s in 0..n {
            let mut want = v(s);
            for t in s..n {
                let weight: f64 = (s..t).map(|i| discounts[i] * log_rhos[i].exp().min(1.0)).product();
                want += weight * log_rhos[t].exp().min(1.0) * (rewards[t] + discounts[t] * v(t + 1) - v(t));
            }
            vtrace_err = vtrace_err.max((got.vs[s] - want).abs());
        }
    }
    outcome(
        attn_err < 1e-6 && vtrace_err < 1e-5,
        format!("{instances} instances: attention max error {attn_err:.1e}, v-trace max error {vtrace_err:.1e}"),
    )
}

// 3 ------------------------------------------------------------------------

fn normalization(params: &ParamSet<f32>) -> Outcome {
    let agent = Agent::new(AgentConfig::toy(NUM_ACTIONS, Variant::TopDown)).unwrap();
    let spec = EnvSpec::collector();
    let mut steps = 0;
    let mut sum_err = 0.0f64;
    let mut threshold_err = 0.0f64;
    let mut episode = 0;
    while steps < 1000 {
        let world = SpriteWorld::new(&spec, 500 + episode).unwrap();
        run_episode(&agent, params, world, 500 + episode, &episode_options(1000 - steps), |rec| {
            for h in &rec.output.heads {
                let s: f64 = h.map.data().iter().map(|&v| v as f64).sum();
                sum_err = sum_err.max((s - 1.0).abs());
                let same = hard_threshold(&h.map, 0.0)?;
                for (a, b) in same.data().iter().zip(h.map.data()) {
                    threshold_err = threshold_err.max((a - b).abs() as f64);
                }
            }
            steps += 1;
            Ok(())
        })
        .unwrap();
        episode += 1;
    }
    let ww = what_where_report(&agent, params, &spec, 3, 77, &episode_options(200)).unwrap();
    let ln10 = 10f64.ln();
    outcome(
        sum_err <= 1e-6 && threshold_err <= 1e-7 && ww.max_abs_d <= ln10,
        format!(
            "{steps} steps: max |Σa - 1| {sum_err:.1e}, threshold-0 error {threshold_err:.1e}, max |D| {:.3} (limit {ln10:.3}) over {} frames",
            ww.max_abs_d,
            ww.frames.len()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn spatial_basis_pinning() -> Outcome {
    let cfg = AgentConfig::appendix(18);
    let basis = SpatialBasis::new(27, 20, 4, 4).unwrap();
    let o_vis = Tensor::<f32>::zeros(&[27, 20, 128]);
    let (k, v) = split_keys_values(&o_vis, 8, 120).unwrap();
    let keys = concat_spatial(&k, &basis).unwrap();
    let values = concat_spatial(&v, &basis).unwrap();
    let query_out = cfg
        .param_specs()
        .into_iter()
        .find(|p: &ParamSpec| p.name == "query/out/w")
        .map(|p| p.shape[1]);
    let pass = cfg.vision_map() == (27, 20)
        && basis.data().shape() == [27, 20, 64]
        && keys.shape() == [27, 20, 72]
        && values.shape() == [27, 20, 184]
        && cfg.query_len() == 72
        && cfg.answer_len() == 184
        && query_out == Some(288);
    outcome(
        pass,
        format!(
            "basis {:?}, keys {:?}, values {:?}, query MLP out {:?}",
            basis.data().shape(),
            keys.shape(),
            values.shape(),
            query_out
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn toy_learning() -> (Outcome, ParamSet<f32>) {
    let spec = EnvSpec::collector();
    let random = random_policy_returns(&spec, 100, TrainConfig::toy().action_repeat, 9).unwrap();
    let baseline = random.iter().sum::<f64>() / random.len() as f64;
    let mut results = Vec::new();
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    for seed in SEEDS {
        let (mean, params) = train_toy(Variant::TopDown, &spec, seed);
        results.push(mean);
        if best.as_ref().is_none_or(|(m, _)| mean > *m) {
            best = Some((mean, params));
        }
    }
    let passing = results.iter().filter(|&&m| m > 5.0 * baseline).count();
    let detail = format!(
        "random baseline {baseline:.3}, seeds {:?}, {passing}/5 above 5x",
        results.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>()
    );
    (outcome(passing >= 4, detail), best.unwrap().1)
}

// 6 ------------------------------------------------------------------------

fn top_down_vs_bottom_up() -> Outcome {
    let spec = EnvSpec::cue_collector();
    let medians: Vec<f64> = [Variant::TopDown, Variant::FixedQuery, Variant::L2NormKey]
        .into_iter()
        .map(|v| median(&SEEDS.iter().map(|&s| train_toy(v, &spec, s).0).collect::<Vec<_>>()))
        .collect();
    let (td, fq, l2) = (medians[0], medians[1], medians[2]);
    outcome(
        td >= 1.2 * fq && td >= 1.2 * l2 && td > 0.0,
        format!("median final return: top_down {td:.3}, fixed_query {fq:.3}, l2_norm_key {l2:.3}"),
    )
}

// 7 ------------------------------------------------------------------------

fn threshold_validity(agent: &Agent, params: &ParamSet<f32>) -> Outcome {
    let report = threshold_sweep(agent, params, &EnvSpec::collector(), &[0.0, 0.1], 50, 10_000, &episode_options(250))
        .unwrap();
    let base = report.row(0.0).unwrap();
    let row = report.row(0.1).unwrap();
    outcome(
        row.ratio >= 0.8 && row.scores.len() >= 15,
        format!(
            "score at t=0 {:.3}, at t=0.1 {:.3}, ratio {:.3} over {} episodes",
            base.mean_score,
            row.mean_score,
            row.ratio,
            row.scores.len()
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn injection(agent: &Agent, params: &ParamSet<f32>) -> Outcome {
    let spec = EnvSpec::collector();
    let report = injection_probe(agent, params, &spec, &default_script(&spec), 10_000, &episode_options(250)).unwrap();
    let ratio = report.mass_ratio().unwrap_or(0.0);
    outcome(
        ratio >= 2.0 && report.rewards_identical,
        format!(
            "median sprite mass {:.4}, control {:.4}, ratio {ratio:.2}, rewards identical {} over {} frames",
            report.median_sprite_mass.unwrap_or(f64::NAN),
            report.median_control_mass.unwrap_or(f64::NAN),
            report.rewards_identical,
            report.frames.len()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn saliency_consistency(agent: &Agent, params: &ParamSet<f32>) -> Outcome {
    let spec = EnvSpec::collector();
    let warm = 100;
    let wanted = 50;
    let probe = ProbeSpec::default();
    let policy = AgentPolicy { agent, params };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut analysed, mut wins) = (0, 0);
    let mut episode = 0;
    while analysed < wanted && episode < 50 {
        let mut frames = Vec::new();
        let mut peaks = Vec::new();
        let (mut prev_action, mut prev_reward) = (None, 0.0f32);
        let world = SpriteWorld::new(&spec, 20_000 + episode).unwrap();
        run_episode(agent, params, world, 20_000 + episode, &episode_options(warm + wanted), |rec| {
            frames.push(Frame { obs: rec.obs.clone(), prev_action, prev_reward });
            prev_action = Some(rec.action);
            prev_reward = rec.reward.clamp(-1.0, 1.0);
            let map = rec.output.heads.iter().fold(vec![0.0f32; rec.output.heads[0].map.len()], |mut acc, h| {
                acc.iter_mut().zip(h.map.data()).for_each(|(a, b)| *a += b);
                acc
            });
            let argmax = map.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            peaks.push((argmax, rec.output.heads[0].map.shape().to_vec()));
            Ok(())
        })
        .unwrap();
        episode += 1;
        let (h, w) = (spec.height, spec.width);
        for end in warm..=frames.len() {
            if analysed == wanted {
                break;
            }
            let warmed = WarmedProbe::new(&policy, &frames[..end], probe).unwrap();
            let (cell, shape) = &peaks[end - 1];
            let (a, b) = (cell / shape[1], cell % shape[1]);
            // centre pixel of the attended cell
            let row = (0..h).filter(|&r| cell_of(r, h, shape[0]) == a).sum::<usize>()
                / (0..h).filter(|&r| cell_of(r, h, shape[0]) == a).count();
            let col = (0..w).filter(|&c| cell_of(c, w, shape[1]) == b).sum::<usize>()
                / (0..w).filter(|&c| cell_of(c, w, shape[1]) == b).count();
            let (at_peak, _) = warmed.probe(row, col).unwrap();
            let (at_random, _) = warmed.probe(rng.random_range(0..h), rng.random_range(0..w)).unwrap();
            analysed += 1;
            wins += usize::from(at_peak > at_random);
        }
    }
    let frac = wins as f64 / analysed.max(1) as f64;
    outcome(
        analysed >= wanted && frac >= 0.7,
        format!("S_pi at attention peak beats a random location in {wins}/{analysed} frames ({:.0}%)", 100.0 * frac),
    )
}

// 10 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let run = |dir: &std::path::Path| {
        let agent = AgentConfig::tiny(Variant::TopDown);
        let env = env_for(&agent);
        let tc = TrainConfig {
            batch: 2,
            unroll: 5,
            total_steps: 600,
            log_every: 1,
            seed: 21,
            ..TrainConfig::toy()
        };
        Trainer::new(agent, env, tc).unwrap().run(Some(dir), Mode::SingleThread).unwrap();
        fs::read(dir.join(METRICS_FILE)).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let metrics_equal = run(a.path()) == run(b.path());

    let (params, cfg) = load_checkpoint(&a.path().join(FINAL_CHECKPOINT)).unwrap();
    let c = tempfile::tempdir().unwrap();
    save_checkpoint(&params, &cfg, c.path()).unwrap();
    let (again, cfg_again) = load_checkpoint(c.path()).unwrap();
    let bit_exact = cfg == cfg_again
        && params.iter().all(|(name, t)| {
            let u = again.get(name).unwrap();
            t.shape() == u.shape() && t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    outcome(
        metrics_equal && bit_exact,
        format!("metrics.jsonl identical {metrics_equal}, checkpoint round trip bit-exact {bit_exact}"),
    )
}

#[test]
fn acceptance_criteria() {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome, t: Instant| {
        let line = format!(
            "criterion {n:>2} {} {name}: {} [{:.0}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push((o.pass, line));
    };

    let t = Instant::now();
    record(1, "gradient oracle", gradient_oracle(), t);
    let t = Instant::now();
    record(2, "attention math oracles", math_oracles(), t);
    let t = Instant::now();
    record(4, "spatial basis pinning", spatial_basis_pinning(), t);
    let t = Instant::now();
    record(10, "determinism", determinism(), t);

    let t = Instant::now();
    let (learning, trained) = toy_learning();
    record(5, "toy learning", learning, t);

    let agent = Agent::new(AgentConfig::toy(NUM_ACTIONS, Variant::TopDown)).unwrap();
    let t = Instant::now();
    record(3, "normalization invariants", normalization(&trained), t);
    let t = Instant::now();
    record(7, "threshold validity", threshold_validity(&agent, &trained), t);
    let t = Instant::now();
    record(8, "injection probe", injection(&agent, &trained), t);
    let t = Instant::now();
    record(9, "saliency consistency", saliency_consistency(&agent, &trained), t);

    let t = Instant::now();
    record(6, "top-down vs bottom-up", top_down_vs_bottom_up(), t);

    lines.sort_by_key(|(_, l)| l[10..12].trim().parse::<usize>().unwrap());
    println!("\nacceptance summary ({:.0}s)", started.elapsed().as_secs_f64());
    for (_, l) in &lines {
        println!("{l}");
    }
    let failed: Vec<&String> = lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
