use crate::agent::{Agent, Variant};
use crate::attention::{what_where_map, WhatWhereMap, WHAT_WHERE_CLAMP};
use crate::envs::{EnvSpec, SpriteWorld};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use crate::training::{run_episode, EpisodeOptions};

/// Red for positive, white for zero, blue for negative, saturating at
/// `|c| = ln 10`. Returns an h×w×3 image.
pub fn what_where_image(c: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[h, w] = c.shape() else {
        return Err(Error::shape("what_where_image", format!("expected h×w, got {:?}", c.shape())));
    };
    let scale = WHAT_WHERE_CLAMP as f32;
    let mut out = Vec::with_capacity(h * w * 3);
    for &v in c.data() {
        let m = (v.abs() / scale).min(1.0);
        if v > 0.0 {
            out.extend_from_slice(&[1.0, 1.0 - m, 1.0 - m]);
        } else if v < 0.0 {
            out.extend_from_slice(&[1.0 - m, 1.0 - m, 1.0]);
        } else {
            out.extend_from_slice(&[1.0, 1.0, 1.0]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhatWhereFrame {
    pub episode: usize,
    pub t: usize,
    pub obs: Tensor<f32>,
    /// One decomposition per head.
    pub heads: Vec<WhatWhereMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhatWhereReport {
    pub frames: Vec<WhatWhereFrame>,
    /// Per head, mean over frames of the attention-weighted sign Σ A·sign(D).
    pub mean_sign: Vec<f64>,
    pub max_abs_d: f64,
}

/// Decompose every head's logits on each frame of `episodes` episodes.
pub fn what_where_report(
    agent: &Agent,
    params: &ParamSet<f32>,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<WhatWhereReport> {
    if agent.config().variant == Variant::L2NormKey {
        return Err(Error::invalid("the l2_norm_key variant has no queries to decompose"));
    }
    let heads = agent.config().heads;
    let mut frames = Vec::new();
    let mut sign_sum = vec![0.0; heads];
    let mut max_abs_d = 0.0f64;
    for ep in 0..episodes {
        let world = SpriteWorld::new(spec, seed + ep as u64)?;
        run_episode(agent, params, world, seed + ep as u64, options, |rec| {
            let mut maps = Vec::with_capacity(heads);
            for (k, head) in rec.output.heads.iter().enumerate() {
                let m = what_where_map(&head.query, &rec.output.keys, agent.basis(), &head.map)?;
                for (d, a) in m.d.data().iter().zip(head.map.data()) {
                    max_abs_d = max_abs_d.max(d.abs() as f64);
                    sign_sum[k] += (*a as f64) * (d.signum() as f64) * (*d != 0.0) as u8 as f64;
                }
                maps.push(m);
            }
            frames.push(WhatWhereFrame {
                episode: ep,
                t: rec.t,
                obs: rec.obs.clone(),
                heads: maps,
            });
            Ok(())
        })?;
    }
    let n = frames.len().max(1) as f64;
    Ok(WhatWhereReport {
        frames,
        mean_sign: sign_sum.into_iter().map(|s| s / n).collect(),
        max_abs_d,
    })
}
