use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentState, StepInput, StepOptions};
use crate::error::{Error, Result};
use crate::tensor::{softmax, ParamSet, Tensor};

/// One agent input: frame plus the previous action and reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub obs: Tensor<f32>,
    pub prev_action: Option<usize>,
    pub prev_reward: f32,
}

/// Anything that maps a recurrent state and a frame to action
/// probabilities, a value and the next state.
pub trait FramePolicy {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    fn evaluate(&self, state: &Self::State, frame: &Frame) -> Result<(Vec<f64>, f64, Self::State)>;
}

pub struct AgentPolicy<'a> {
    pub agent: &'a Agent,
    pub params: &'a ParamSet<f32>,
}

impl FramePolicy for AgentPolicy<'_> {
    type State = AgentState<f32>;

    fn initial_state(&self) -> AgentState<f32> {
        self.agent.initial_state()
    }

    fn evaluate(&self, state: &AgentState<f32>, frame: &Frame) -> Result<(Vec<f64>, f64, AgentState<f32>)> {
        let input = StepInput {
            obs: &frame.obs,
            prev_action: frame.prev_action,
            prev_reward: frame.prev_reward,
        };
        let out = self.agent.step(self.params, &input, state, StepOptions::default())?;
        let probs = softmax(&out.logits.to_f64_vec());
        Ok((probs, out.value as f64, out.state))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Gaussian width in pixels, for both the blur and the blending mask.
    pub sigma: f32,
    /// Probe every `stride` pixels along each axis.
    pub stride: usize,
    /// Mask weight in [0, 1]; 0 leaves the frame untouched.
    pub strength: f32,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            sigma: 3.0,
            stride: 2,
            strength: 1.0,
        }
    }
}

impl ProbeSpec {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        if self.stride == 0 {
            return Err(Error::invalid("probe stride must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid(format!("strength must be in [0, 1], got {}", self.strength)));
        }
        Ok(())
    }

    /// Kernel half-width; the kernel spans 5σ.
    pub fn radius(&self) -> usize {
        (2.5 * self.sigma).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyPair {
    /// Over the probe grid, rows × cols.
    pub s_pi: Tensor<f32>,
    pub s_v: Tensor<f32>,
    pub sigma: f32,
    pub stride: usize,
    /// Pixel coordinates of the probe grid.
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

fn gaussian_kernel(sigma: f32, radius: usize) -> Vec<f32> {
    let k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(obs: &Tensor<f32>, sigma: f32) -> Result<Tensor<f32>> {
    let &[h, w, c] = obs.shape() else {
        return Err(Error::shape("gaussian_blur", format!("expected H×W×C, got {:?}", obs.shape())));
    };
    let radius = (2.5 * sigma).ceil() as usize;
    let k = gaussian_kernel(sigma, radius);
    let src = obs.data();
    let mut tmp = vec![0.0f32; src.len()];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let cc = (col as i64 + i as i64 - radius as i64).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(r * w + cc) * c + ch];
                }
                tmp[(r * w + col) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let rr = (r as i64 + i as i64 - radius as i64).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(rr * w + col) * c + ch];
                }
                out[(r * w + col) * c + ch] = acc;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// `obs (1 - M) + blurred M` with a Gaussian mask M centred at (i, j) and
/// truncated to the kernel window.
pub fn perturb(obs: &Tensor<f32>, blurred: &Tensor<f32>, center: (usize, usize), spec: &ProbeSpec) -> Tensor<f32> {
    let (h, w, c) = (obs.shape()[0], obs.shape()[1], obs.shape()[2]);
    let radius = spec.radius() as i64;
    let mut out = obs.clone();
    let (ci, cj) = (center.0 as i64, center.1 as i64);
    for r in (ci - radius).max(0)..=(ci + radius).min(h as i64 - 1) {
        for col in (cj - radius).max(0)..=(cj + radius).min(w as i64 - 1) {
            let d2 = ((r - ci).pow(2) + (col - cj).pow(2)) as f32;
            let m = spec.strength * (-d2 / (2.0 * spec.sigma * spec.sigma)).exp();
            let base = (r as usize * w + col as usize) * c;
            for ch in 0..c {
                let o = &mut out.data_mut()[base + ch];
                *o = *o * (1.0 - m) + blurred.data()[base + ch] * m;
            }
        }
    }
    out
}

/// Policy state after all but the last frame, plus the unperturbed outputs
/// on the last frame.
pub struct WarmedProbe<'p, P: FramePolicy> {
    policy: &'p P,
    state: P::State,
    last: Frame,
    blurred: Tensor<f32>,
    probs: Vec<f64>,
    value: f64,
    spec: ProbeSpec,
}

impl<'p, P: FramePolicy> WarmedProbe<'p, P> {
    pub fn new(policy: &'p P, warm_frames: &[Frame], spec: ProbeSpec) -> Result<Self> {
        spec.validate()?;
        let Some((last, warm)) = warm_frames.split_last() else {
            return Err(Error::invalid("saliency needs at least one frame"));
        };
        let mut state = policy.initial_state();
        for f in warm {
            state = policy.evaluate(&state, f)?.2;
        }
        let (probs, value, _) = policy.evaluate(&state, last)?;
        let blurred = gaussian_blur(&last.obs, spec.sigma)?;
        Ok(WarmedProbe {
            policy,
            state,
            last: last.clone(),
            blurred,
            probs,
            value,
            spec,
        })
    }

    /// (S_π, S_V) for a blur centred at pixel (i, j).
    pub fn probe(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        let frame = Frame {
            obs: perturb(&self.last.obs, &self.blurred, (i, j), &self.spec),
            ..self.last.clone()
        };
        let (probs, value, _) = self.policy.evaluate(&self.state, &frame)?;
        let s_pi = 0.5 * probs.iter().zip(&self.probs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let s_v = 0.5 * (value - self.value).powi(2);
        Ok((s_pi, s_v))
    }

    pub fn frame(&self) -> &Frame {
        &self.last
    }
}

pub fn saliency_map<P: FramePolicy>(policy: &P, warm_frames: &[Frame], spec: ProbeSpec) -> Result<SaliencyPair> {
    let probe = WarmedProbe::new(policy, warm_frames, spec)?;
    let (h, w) = (probe.last.obs.shape()[0], probe.last.obs.shape()[1]);
    let rows: Vec<usize> = (0..h).step_by(spec.stride).collect();
    let cols: Vec<usize> = (0..w).step_by(spec.stride).collect();
    let mut s_pi = Vec::with_capacity(rows.len() * cols.len());
    let mut s_v = Vec::with_capacity(rows.len() * cols.len());
    for &i in &rows {
        for &j in &cols {
            let (p, v) = probe.probe(i, j)?;
            s_pi.push(p as f32);
            s_v.push(v as f32);
        }
    }
    Ok(SaliencyPair {
        s_pi: Tensor::new(vec![rows.len(), cols.len()], s_pi)?,
        s_v: Tensor::new(vec![rows.len(), cols.len()], s_v)?,
        sigma: spec.sigma,
        stride: spec.stride,
        rows,
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ignores pixels entirely.
    struct Blind;

    impl FramePolicy for Blind {
        type State = ();
        fn initial_state(&self) {}
        fn evaluate(&self, _: &(), _: &Frame) -> Result<(Vec<f64>, f64, ())> {
            Ok((vec![0.5, 0.5], 1.0, ()))
        }
    }

    /// Logits are (mean of channel 0 over the top-left 3×3 patch, 0); value
    /// is the same mean.
    struct PatchMean;

    fn patch_mean(obs: &Tensor<f32>) -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += obs.at(&[r, c, 0]) as f64;
            }
        }
        s / 9.0
    }

    impl FramePolicy for PatchMean {
        type State = ();
        fn initial_state(&self) {}
        fn evaluate(&self, _: &(), f: &Frame) -> Result<(Vec<f64>, f64, ())> {
            let m = patch_mean(&f.obs);
            Ok((softmax(&[m, 0.0]), m, ()))
        }
    }

    fn checker() -> Frame {
        let mut t = Tensor::zeros(&[8, 8, 3]);
        for r in 0..8 {
            for c in 0..8 {
                if (r + c) % 2 == 0 {
                    for ch in 0..3 {
                        t.data_mut()[(r * 8 + c) * 3 + ch] = 1.0;
                    }
                }
            }
        }
        Frame {
            obs: t,
            prev_action: None,
            prev_reward: 0.0,
        }
    }

    #[test]
    fn zero_strength_gives_zero_maps() {
        let spec = ProbeSpec {
            strength: 0.0,
            sigma: 1.0,
            stride: 1,
        };
        let s = saliency_map(&PatchMean, &[checker()], spec).unwrap();
        assert!(s.s_pi.data().iter().all(|&v| v == 0.0));
        assert!(s.s_v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blind_policy_has_zero_policy_saliency() {
        let s = saliency_map(&Blind, &[checker(), checker()], ProbeSpec::default()).unwrap();
        assert!(s.s_pi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_mean_stub_matches_closed_form() {
        let spec = ProbeSpec {
            sigma: 1.0,
            stride: 3,
            strength: 1.0,
        };
        let frame = checker();
        let s = saliency_map(&PatchMean, &[frame.clone()], spec).unwrap();
        let blurred = gaussian_blur(&frame.obs, 1.0).unwrap();
        let base = softmax(&[patch_mean(&frame.obs), 0.0]);
        for (a, &i) in s.rows.iter().enumerate() {
            for (b, &j) in s.cols.iter().enumerate() {
                let p = perturb(&frame.obs, &blurred, (i, j), &spec);
                let probs = softmax(&[patch_mean(&p), 0.0]);
                let want = 0.5 * ((probs[0] - base[0]).powi(2) + (probs[1] - base[1]).powi(2));
                let got = s.s_pi.at(&[a, b]) as f64;
                assert!((got - want).abs() < 1e-9, "({i},{j}) {got} vs {want}");
            }
        }
        // Probes far from the patch leave it untouched.
        assert_eq!(s.s_pi.at(&[2, 2]), 0.0);
        assert!(s.s_pi.at(&[0, 0]) > 0.0);
    }

    #[test]
    fn blur_preserves_constant_frames() {
        let t = Tensor::full(&[5, 4, 3], 0.3f32);
        let b = gaussian_blur(&t, 2.0).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let spec = ProbeSpec {
            sigma: 0.0,
            ..ProbeSpec::default()
        };
        assert!(saliency_map(&Blind, &[checker()], spec).is_err());
    }
}
