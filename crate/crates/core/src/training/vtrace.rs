use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct VTraceResult {
    /// Value targets v_s, one per step.
    pub vs: Vec<f64>,
    /// ρ_s (r_s + γ_s v_{s+1} - V(x_s)).
    pub pg_advantages: Vec<f64>,
    /// Clipped importance ratios min(ρ̄, π/μ).
    pub rhos: Vec<f64>,
}

/// V-trace from per-step log importance ratios.
///
/// `discounts[t]` is γ already masked to 0 where step `t` ended an episode.
/// `values` has length T; `bootstrap` is V(x_T).
pub fn vtrace_from_log_rhos(
    log_rhos: &[f64],
    discounts: &[f64],
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    rho_bar: f64,
    c_bar: f64,
) -> Result<VTraceResult> {
    let t_len = values.len();
    if log_rhos.len() != t_len || discounts.len() != t_len || rewards.len() != t_len {
        return Err(Error::shape(
            "vtrace",
            format!(
                "lengths differ: log_rhos {}, discounts {}, rewards {}, values {}",
                log_rhos.len(),
                discounts.len(),
                rewards.len(),
                t_len
            ),
        ));
    }
    if rho_bar < 1.0 || c_bar < 1.0 {
        return Err(Error::invalid(format!("clip thresholds must be >= 1, got {rho_bar}, {c_bar}")));
    }
    let ratios: Vec<f64> = log_rhos.iter().map(|l| l.exp()).collect();
    let rhos: Vec<f64> = ratios.iter().map(|r| r.min(rho_bar)).collect();
    let cs: Vec<f64> = ratios.iter().map(|r| r.min(c_bar)).collect();

    let next_value = |t: usize| if t + 1 < t_len { values[t + 1] } else { bootstrap };
    let mut vs = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let delta = rhos[t] * (rewards[t] + discounts[t] * next_value(t) - values[t]);
        acc = delta + discounts[t] * cs[t] * acc;
        vs[t] = values[t] + acc;
    }
    let pg_advantages = (0..t_len)
        .map(|t| {
            let vs_next = if t + 1 < t_len { vs[t + 1] } else { bootstrap };
            rhos[t] * (rewards[t] + discounts[t] * vs_next - values[t])
        })
        .collect();
    Ok(VTraceResult {
        vs,
        pg_advantages,
        rhos,
    })
}

/// V-trace from behaviour and target logits.
///
/// `target_values` has length T + 1, the last entry being the bootstrap.
#[allow(clippy::too_many_arguments)]
pub fn vtrace_targets(
    behavior_logits: &[Tensor<f32>],
    target_logits: &[Tensor<f32>],
    actions: &[usize],
    rewards: &[f32],
    dones: &[bool],
    target_values: &[f64],
    gamma: f64,
    rho_bar: f64,
    c_bar: f64,
) -> Result<VTraceResult> {
    let t_len = actions.len();
    if behavior_logits.len() != t_len
        || target_logits.len() != t_len
        || rewards.len() != t_len
        || dones.len() != t_len
        || target_values.len() != t_len + 1
    {
        return Err(Error::shape(
            "vtrace_targets",
            format!(
                "T = {t_len} actions but {} behaviour logits, {} target logits, {} rewards, {} dones, {} values (want T + 1)",
                behavior_logits.len(),
                target_logits.len(),
                rewards.len(),
                dones.len(),
                target_values.len()
            ),
        ));
    }
    let mut log_rhos = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let b = log_softmax(&behavior_logits[t].to_f64_vec());
        let p = log_softmax(&target_logits[t].to_f64_vec());
        let a = actions[t];
        if a >= b.len() || a >= p.len() {
            return Err(Error::invalid(format!("action {a} out of range at step {t}")));
        }
        log_rhos.push(p[a] - b[a]);
    }
    let discounts: Vec<f64> = dones.iter().map(|&d| if d { 0.0 } else { gamma }).collect();
    let rewards: Vec<f64> = rewards.iter().map(|&r| r as f64).collect();
    vtrace_from_log_rhos(
        &log_rhos,
        &discounts,
        &rewards,
        &target_values[..t_len],
        target_values[t_len],
        rho_bar,
        c_bar,
    )
}
