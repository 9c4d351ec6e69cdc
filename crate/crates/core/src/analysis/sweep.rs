use std::io::Write;

use crate::agent::{Agent, StepOptions};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use crate::training::{evaluate_with_sampling, mean_and_stderr, EpisodeOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: f64,
    pub mean_score: f64,
    pub stderr: f64,
    /// `mean_score / mean_score(t = 0)`.
    pub ratio: f64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, t: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.t == t)
    }

    /// `t,mean_score,stderr,ratio`
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,mean_score,stderr,ratio")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.t, r.mean_score, r.stderr, r.ratio)?;
        }
        Ok(())
    }
}

/// Evaluate with every head's map hard-thresholded at each `t`.
///
/// Every threshold plays the same worlds, seeded `seed + i`. Threshold number
/// `k` in the list samples actions from streams starting at
/// `seed + k * episodes`, so sampling seeds never repeat across thresholds.
pub fn threshold_sweep(
    agent: &Agent,
    params: &ParamSet<f32>,
    spec: &EnvSpec,
    thresholds: &[f64],
    episodes: usize,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<SweepReport> {
    if !thresholds.contains(&0.0) {
        return Err(Error::invalid("threshold list must include 0"));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
    }
    if episodes == 0 {
        return Err(Error::invalid("sweep needs at least one episode per threshold"));
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for (k, &t) in thresholds.iter().enumerate() {
        let opts = EpisodeOptions {
            step: StepOptions {
                threshold: if t == 0.0 { None } else { Some(t) },
            },
            ..*options
        };
        let scores = evaluate_with_sampling(agent, params, spec, episodes, seed, seed + (k * episodes) as u64, &opts)?;
        let (mean_score, stderr) = mean_and_stderr(&scores);
        rows.push(SweepRow {
            t,
            mean_score,
            stderr,
            ratio: f64::NAN,
            scores,
        });
    }
    let base = rows.iter().find(|r| r.t == 0.0).map(|r| r.mean_score).expect("checked above");
    for r in &mut rows {
        r.ratio = r.mean_score / base;
    }
    Ok(SweepReport { rows })
}
