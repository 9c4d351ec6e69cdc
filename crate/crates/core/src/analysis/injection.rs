use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, StepInput};
use crate::envs::{ActionRepeat, EnvSpec, Environment, Sprite, SpriteKind, SpriteWorld, ENEMY_COLOR};
use crate::error::Result;
use crate::tensor::{softmax, ParamSet, Tensor};
use crate::training::{clip_reward, sample_action, EpisodeOptions};

/// A sprite spliced into the injected twin before agent step `at_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSprite {
    pub sprite: Sprite,
    pub at_step: usize,
}

/// Enemy-coloured sprite entering at the left edge, half way down, drifting
/// right at half a pixel per frame.
pub fn default_script(spec: &EnvSpec) -> Vec<ScriptedSprite> {
    let row = (spec.height / 2).saturating_sub(spec.sprite_size / 2) as f32;
    vec![ScriptedSprite {
        sprite: Sprite::new(SpriteKind::Injected, [row, 0.0], spec.sprite_size, ENEMY_COLOR).with_velocity([0.0, 0.5]),
        at_step: 0,
    }]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeFrame {
    pub t: usize,
    /// Mean over heads of the attention mass inside the injected sprites'
    /// boxes; `None` while nothing injected is on screen.
    pub sprite_mass: Option<f64>,
    pub control_mass: Option<f64>,
    /// Total-variation distance between the twins' policies.
    pub divergence: f64,
    pub argmax_differs: bool,
    pub clean_reward: f32,
    pub injected_reward: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectionReport {
    pub frames: Vec<ProbeFrame>,
    /// Bitwise equality of the twins' reward and done sequences.
    pub rewards_identical: bool,
    /// Bitwise equality of every observation and policy output.
    pub twins_identical: bool,
    pub median_sprite_mass: Option<f64>,
    pub median_control_mass: Option<f64>,
}

impl InjectionReport {
    pub fn mass_ratio(&self) -> Option<f64> {
        Some(self.median_sprite_mass? / self.median_control_mass?)
    }
}

/// Attention mass of an h×w map inside a pixel box of an H×W frame, with
/// cells weighted by their fractional overlap.
pub fn box_mass(map: &Tensor<f32>, frame_hw: (usize, usize), bx: (i64, i64, i64, i64)) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (fh, fw) = (frame_hw.0 as f64, frame_hw.1 as f64);
    let (top, left) = ((bx.0.max(0)) as f64, (bx.1.max(0)) as f64);
    let (bottom, right) = ((bx.2 as f64).min(fh), (bx.3 as f64).min(fw));
    if bottom <= top || right <= left {
        return 0.0;
    }
    let (ch, cw) = (fh / h as f64, fw / w as f64);
    let mut mass = 0.0;
    for r in 0..h {
        let (r0, r1) = (r as f64 * ch, (r + 1) as f64 * ch);
        let dr = (r1.min(bottom) - r0.max(top)).max(0.0);
        if dr == 0.0 {
            continue;
        }
        for c in 0..w {
            let (c0, c1) = (c as f64 * cw, (c + 1) as f64 * cw);
            let dc = (c1.min(right) - c0.max(left)).max(0.0);
            mass += map.data()[r * w + c] as f64 * dr * dc / (ch * cw);
        }
    }
    mass
}

fn visible_box(s: &Sprite, h: usize, w: usize) -> Option<(i64, i64, i64, i64)> {
    let (t, l, b, r) = s.pixel_box();
    let clipped = (t.max(0), l.max(0), b.min(h as i64), r.min(w as i64));
    (clipped.0 < clipped.2 && clipped.1 < clipped.3).then_some(clipped)
}

fn overlaps(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Twin episodes from the same seed, one with `script` spliced in. The
/// clean twin's sampled actions drive both, so any difference in the
/// injected twin's outputs comes from the pixels alone.
pub fn injection_probe(
    agent: &Agent,
    params: &ParamSet<f32>,
    spec: &EnvSpec,
    script: &[ScriptedSprite],
    seed: u64,
    options: &EpisodeOptions,
) -> Result<InjectionReport> {
    let mut clean = ActionRepeat::new(SpriteWorld::new(spec, seed)?, options.action_repeat)?;
    let mut injected = ActionRepeat::new(SpriteWorld::new(spec, seed)?, options.action_repeat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut control_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_47_01);
    let (h, w) = (spec.height, spec.width);

    let mut states = (agent.initial_state::<f32>(), agent.initial_state::<f32>());
    let mut prev_action = None;
    let mut prev_rewards = (0.0f32, 0.0f32);
    let mut frames = Vec::new();
    let mut rewards_identical = true;
    let mut twins_identical = true;

    for t in 0..options.max_agent_steps {
        for s in script.iter().filter(|s| s.at_step == t) {
            injected.inner_mut().inject_sprite(s.sprite.clone())?;
        }
        let obs0 = clean.observation();
        let obs1 = injected.observation();
        let out0 = agent.step(
            params,
            &StepInput {
                obs: &obs0,
                prev_action,
                prev_reward: prev_rewards.0,
            },
            &states.0,
            options.step,
        )?;
        let out1 = agent.step(
            params,
            &StepInput {
                obs: &obs1,
                prev_action,
                prev_reward: prev_rewards.1,
            },
            &states.1,
            options.step,
        )?;
        twins_identical &= obs0 == obs1 && out0.logits == out1.logits && out0.value.to_bits() == out1.value.to_bits();

        let boxes: Vec<_> = injected
            .inner()
            .sprites()
            .iter()
            .filter(|s| s.kind == SpriteKind::Injected)
            .filter_map(|s| visible_box(s, h, w))
            .collect();
        let heads = out1.heads.len().max(1) as f64;
        let mass_in = |bx| out1.heads.iter().map(|hd| box_mass(&hd.map, (h, w), bx)).sum::<f64>() / heads;
        let (sprite_mass, control_mass) = if boxes.is_empty() {
            (None, None)
        } else {
            let sprite: f64 = boxes.iter().map(|&b| mass_in(b)).sum();
            let mut control = 0.0;
            for &b in &boxes {
                let (bh, bw) = (b.2 - b.0, b.3 - b.1);
                let mut cand = (0, 0, bh, bw);
                for _ in 0..64 {
                    let top = control_rng.random_range(0..=(h as i64 - bh));
                    let left = control_rng.random_range(0..=(w as i64 - bw));
                    cand = (top, left, top + bh, left + bw);
                    if !boxes.iter().any(|&o| overlaps(o, cand)) {
                        break;
                    }
                }
                control += mass_in(cand);
            }
            (Some(sprite), Some(control))
        };

        let p0 = softmax(&out0.logits.to_f64_vec());
        let p1 = softmax(&out1.logits.to_f64_vec());
        let divergence = 0.5 * p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let argmax = |p: &[f64]| (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0);

        let action = sample_action(out0.logits.data(), &mut rng);
        let r0 = clean.step(action)?;
        let r1 = injected.step(action)?;
        rewards_identical &= r0.reward.to_bits() == r1.reward.to_bits() && r0.done == r1.done;
        frames.push(ProbeFrame {
            t,
            sprite_mass,
            control_mass,
            divergence,
            argmax_differs: argmax(&p0) != argmax(&p1),
            clean_reward: r0.reward,
            injected_reward: r1.reward,
        });
        if r0.done || r1.done {
            break;
        }
        states = (out0.state, out1.state);
        prev_action = Some(action);
        prev_rewards = (
            clip_reward(r0.reward, options.reward_clip),
            clip_reward(r1.reward, options.reward_clip),
        );
    }
    let median_sprite_mass = median(frames.iter().filter_map(|f| f.sprite_mass).collect());
    let median_control_mass = median(frames.iter().filter_map(|f| f.control_mass).collect());
    Ok(InjectionReport {
        frames,
        rewards_identical,
        twins_identical: twins_identical && rewards_identical,
        median_sprite_mass,
        median_control_mass,
    })
}
