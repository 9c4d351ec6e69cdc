//! Brute-force references for the attention primitives and v-trace, each run
//! on 100+ random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topdown_attention::attention::{attend, attention_logits, marginal_distributions, spatial_softmax};
use topdown_attention::tensor::Tensor;
use topdown_attention::training::{vtrace_from_log_rhos, vtrace_targets};

const INSTANCES: u64 = 150;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..7))
}

fn at(t: &Tensor<f64>, i: usize, j: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(i * s[1] + j) * s[2] + c]
}

#[test]
fn attention_logits_match_explicit_triple_loop() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = dims(&mut rng);
        let keys = random_tensor(&mut rng, &[h, w, c]);
        let q = random_tensor(&mut rng, &[c]);
        let got = attention_logits(&q, &keys).unwrap();
        for i in 0..h {
            for j in 0..w {
                let mut want = 0.0;
                for l in 0..c {
                    want += q.data()[l] * at(&keys, i, j, l);
                }
                assert!((got.data()[i * w + j] - want).abs() < 1e-6, "seed {seed}");
            }
        }
    }
}

#[test]
fn softmax_and_attend_match_direct_formulas() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (h, w, c) = dims(&mut rng);
        let logits = random_tensor(&mut rng, &[h, w]);
        let values = random_tensor(&mut rng, &[h, w, c]);
        let map = spatial_softmax(&logits);
        // exp(x) / Σ exp(x) without max subtraction; logits are small here
        let z: f64 = logits.data().iter().map(|x| x.exp()).sum();
        for (a, x) in map.data().iter().zip(logits.data()) {
            assert!((a - x.exp() / z).abs() < 1e-6);
        }
        let answer = attend(&map, &values).unwrap();
        for l in 0..c {
            let mut want = 0.0;
            for i in 0..h {
                for j in 0..w {
                    want += map.data()[i * w + j] * at(&values, i, j, l);
                }
            }
            assert!((answer.data()[l] - want).abs() < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn marginals_match_independent_sums() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (h, w, _) = dims(&mut rng);
        let map = spatial_softmax(&random_tensor(&mut rng, &[h, w]));
        let (rows, cols) = marginal_distributions(&map).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let want: f64 = map.data()[i * w..(i + 1) * w].iter().sum();
            assert!((r - want).abs() < 1e-6);
        }
        for (j, col) in cols.iter().enumerate() {
            let want: f64 = map.data().iter().skip(j).step_by(w).sum();
            assert!((col - want).abs() < 1e-6);
        }
        assert!((rows.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((cols.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

struct Instance {
    log_rhos: Vec<f64>,
    discounts: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    bootstrap: f64,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let t = rng.random_range(1..12);
    Instance {
        log_rhos: (0..t).map(|_| rng.random_range(-1.5..1.5)).collect(),
        discounts: (0..t)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.5..1.0) })
            .collect(),
        rewards: (0..t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        values: (0..t).map(|_| rng.random_range(-3.0..3.0)).collect(),
        bootstrap: rng.random_range(-3.0..3.0),
    }
}

/// v_s = V(x_s) + Σ_{t≥s} (Π_{s≤i<t} γ_i c_i) δ_t, summed forwards.
fn forward_sum_vs(x: &Instance, rho_bar: f64, c_bar: f64) -> Vec<f64> {
    let n = x.values.len();
    let v = |t: usize| if t < n { x.values[t] } else { x.bootstrap };
    (0..n)
        .map(|s| {
            let mut total = v(s);
            for t in s..n {
                let mut weight = 1.0;
                for i in s..t {
                    weight *= x.discounts[i] * x.log_rhos[i].exp().min(c_bar);
                }
                let rho = x.log_rhos[t].exp().min(rho_bar);
                total += weight * rho * (x.rewards[t] + x.discounts[t] * v(t + 1) - v(t));
            }
            total
        })
        .collect()
}

#[test]
fn vtrace_recursion_matches_forward_sum() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let x = random_instance(&mut rng);
        let rho_bar = rng.random_range(1.0..2.0);
        let c_bar = rng.random_range(1.0..rho_bar + 1e-9);
        let got = vtrace_from_log_rhos(&x.log_rhos, &x.discounts, &x.rewards, &x.values, x.bootstrap, rho_bar, c_bar)
            .unwrap();
        let want = forward_sum_vs(&x, rho_bar, c_bar);
        let n = x.values.len();
        for s in 0..n {
            assert!((got.vs[s] - want[s]).abs() < 1e-5, "seed {seed} s {s}");
            let next = if s + 1 < n { want[s + 1] } else { x.bootstrap };
            let rho = x.log_rhos[s].exp().min(rho_bar);
            let adv = rho * (x.rewards[s] + x.discounts[s] * next - x.values[s]);
            assert!((got.pg_advantages[s] - adv).abs() < 1e-5, "seed {seed} s {s}");
        }
    }
}

#[test]
fn on_policy_vtrace_is_the_bootstrapped_n_step_return() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let mut x = random_instance(&mut rng);
        x.log_rhos.iter_mut().for_each(|l| *l = 0.0);
        let got = vtrace_from_log_rhos(&x.log_rhos, &x.discounts, &x.rewards, &x.values, x.bootstrap, 1.0, 1.0)
            .unwrap();
        let n = x.values.len();
        for s in 0..n {
            let mut ret = 0.0;
            let mut scale = 1.0;
            for t in s..n {
                ret += scale * x.rewards[t];
                scale *= x.discounts[t];
            }
            ret += scale * x.bootstrap;
            assert!((got.vs[s] - ret).abs() < 1e-5, "seed {seed}");
            assert!(got.rhos.iter().all(|&r| r == 1.0));
        }
    }
}

#[test]
fn zero_discount_targets_are_immediate_rewards() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let mut x = random_instance(&mut rng);
        x.discounts.iter_mut().for_each(|d| *d = 0.0);
        x.log_rhos.iter_mut().for_each(|l| *l = l.min(0.0));
        let got = vtrace_from_log_rhos(&x.log_rhos, &x.discounts, &x.rewards, &x.values, x.bootstrap, 1.0, 1.0)
            .unwrap();
        for t in 0..x.values.len() {
            let rho = x.log_rhos[t].exp();
            let want = x.values[t] + rho * (x.rewards[t] - x.values[t]);
            assert!((got.vs[t] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn logit_interface_agrees_with_log_rho_interface() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let t = rng.random_range(1..10);
        let actions: Vec<usize> = (0..t).map(|_| rng.random_range(0..4)).collect();
        let logits = |rng: &mut ChaCha8Rng| -> Vec<Tensor<f32>> {
            (0..t)
                .map(|_| Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap())
                .collect()
        };
        let behaviour = logits(&mut rng);
        let target = logits(&mut rng);
        let rewards: Vec<f32> = (0..t).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let dones: Vec<bool> = (0..t).map(|_| rng.random_bool(0.2)).collect();
        let values: Vec<f64> = (0..=t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma = 0.9;
        let got = vtrace_targets(&behaviour, &target, &actions, &rewards, &dones, &values, gamma, 1.0, 1.0).unwrap();

        let log_prob = |l: &Tensor<f32>, a: usize| {
            let x: Vec<f64> = l.data().iter().map(|&v| v as f64).collect();
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            x[a] - m - x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let log_rhos: Vec<f64> = (0..t)
            .map(|i| log_prob(&target[i], actions[i]) - log_prob(&behaviour[i], actions[i]))
            .collect();
        let discounts: Vec<f64> = dones.iter().map(|&d| if d { 0.0 } else { gamma }).collect();
        let r64: Vec<f64> = rewards.iter().map(|&r| r as f64).collect();
        let want = vtrace_from_log_rhos(&log_rhos, &discounts, &r64, &values[..t], values[t], 1.0, 1.0).unwrap();
        for i in 0..t {
            assert!((got.vs[i] - want.vs[i]).abs() < 1e-5);
            assert!((got.pg_advantages[i] - want.pg_advantages[i]).abs() < 1e-5);
        }
    }
}
