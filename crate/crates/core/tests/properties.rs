use proptest::prelude::*;
use topdown_attention::agent::{Agent, AgentConfig, StepInput, StepOptions, Variant};
use topdown_attention::analysis::{
    injection_probe, render_overlay, saliency_map, threshold_sweep, what_where_image, AgentPolicy, Frame, ProbeSpec,
};
use topdown_attention::attention::{
    attend, attention_logits, concat_spatial, hard_threshold, spatial_softmax, what_where_map, SpatialBasis,
};
use topdown_attention::envs::SpriteWorld;
use topdown_attention::tensor::{clip_gradients, Gradients, ParamSet, Tensor};
use topdown_attention::training::{clip_reward, entropy, env_for, evaluate, run_episode, EpisodeOptions};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn tensor32(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn short_episodes() -> EpisodeOptions {
    EpisodeOptions {
        max_agent_steps: 12,
        ..EpisodeOptions::default()
    }
}

fn tiny(variant: Variant, seed: u64) -> (Agent, ParamSet<f32>) {
    let agent = Agent::new(AgentConfig::tiny(variant)).unwrap();
    let params = agent.init_params(seed);
    (agent, params)
}

fn obs(seed: u64) -> Tensor<f32> {
    let mut x = seed.wrapping_add(1);
    let data = (0..20 * 16 * 3)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    tensor32(&[20, 16, 3], data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        logits in prop::collection::vec(-5.0f64..5.0, 20),
        c in -50.0f64..50.0,
    ) {
        let a = spatial_softmax(&tensor(&[4, 5], logits.clone()));
        let b = spatial_softmax(&tensor(&[4, 5], logits.iter().map(|x| x + c).collect()));
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn hard_threshold_renormalises_onto_a_sub_support(
        logits in prop::collection::vec(-4.0f64..4.0, 20),
        t in 0.0f64..=1.0,
    ) {
        let map = spatial_softmax(&tensor(&[5, 4], logits));
        let same = hard_threshold(&map, 0.0).unwrap();
        for (x, y) in same.data().iter().zip(map.data()) {
            prop_assert!((x - y).abs() <= 1e-7);
        }
        let cut = hard_threshold(&map, t).unwrap();
        prop_assert!((cut.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (x, y) in cut.data().iter().zip(map.data()) {
            prop_assert!(*x == 0.0 || *y > 0.0);
        }
    }

    #[test]
    fn uniform_attention_ignores_spatial_permutations(
        values in prop::collection::vec(-1.0f64..1.0, 16 * 3),
        shift in 1usize..16,
    ) {
        let v = tensor(&[4, 4, 3], values.clone());
        let permuted: Vec<f64> = (0..16).flat_map(|p| values[((p + shift) % 16) * 3..][..3].to_vec()).collect();
        let pv = tensor(&[4, 4, 3], permuted);
        let uniform = Tensor::full(&[4, 4], 1.0 / 16.0);
        let a = attend(&uniform, &v).unwrap();
        let b = attend(&uniform, &pv).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn spatial_basis_breaks_permutation_invariance(
        values in prop::collection::vec(-1.0f64..1.0, 16 * 3),
        peak in 0usize..16,
        shift in 1usize..16,
    ) {
        // a peaked map moved together with the values: content answer is
        // unchanged, the unpermuted basis block is not
        let basis = SpatialBasis::new(4, 4, 2, 2).unwrap();
        let mut map = vec![0.01; 16];
        map[peak] = 1.0 - 0.15;
        let perm = |p: usize| (p + shift) % 16;
        let mut moved_map = vec![0.0; 16];
        let mut moved_values = vec![0.0; 48];
        for p in 0..16 {
            moved_map[perm(p)] = map[p];
            moved_values[perm(p) * 3..][..3].copy_from_slice(&values[p * 3..][..3]);
        }
        let a = attend(&tensor(&[4, 4], map), &concat_spatial(&tensor(&[4, 4, 3], values), &basis).unwrap()).unwrap();
        let b = attend(&tensor(&[4, 4], moved_map), &concat_spatial(&tensor(&[4, 4, 3], moved_values), &basis).unwrap())
            .unwrap();
        for l in 0..3 {
            prop_assert!((a.data()[l] - b.data()[l]).abs() < 1e-9);
        }
        let spatial_diff: f64 = a.data()[3..].iter().zip(&b.data()[3..]).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!(spatial_diff > 1e-3);
    }

    #[test]
    fn what_plus_where_is_the_logit(
        query in prop::collection::vec(-1.0f32..1.0, 4 + 16),
        keys in prop::collection::vec(-1.0f32..1.0, 5 * 4 * 4),
    ) {
        let basis = SpatialBasis::new(5, 4, 2, 2).unwrap();
        let q = tensor32(&[20], query);
        let k = tensor32(&[5, 4, 4], keys);
        let map = Tensor::full(&[5, 4], 0.05f32);
        let ww = what_where_map(&q, &k, &basis, &map).unwrap();
        let logits = attention_logits(&q, &concat_spatial(&k, &basis).unwrap()).unwrap();
        for ((a, b), l) in ww.what.data().iter().zip(ww.r#where.data()).zip(logits.data()) {
            prop_assert!((a + b - l).abs() < 1e-6);
        }
        prop_assert!(ww.d.data().iter().all(|d| d.abs() <= 10f32.ln() + 1e-6));
    }

    #[test]
    fn what_where_image_is_white_where_attention_vanishes(
        query in prop::collection::vec(-2.0f32..2.0, 4 + 16),
        keys in prop::collection::vec(-2.0f32..2.0, 5 * 4 * 4),
        mask in prop::collection::vec(any::<bool>(), 20),
    ) {
        let basis = SpatialBasis::new(5, 4, 2, 2).unwrap();
        let map = tensor32(&[5, 4], mask.iter().map(|&m| if m { 0.1 } else { 0.0 }).collect());
        let ww = what_where_map(&tensor32(&[20], query), &tensor32(&[5, 4, 4], keys), &basis, &map).unwrap();
        let img = what_where_image(&ww.c).unwrap();
        for (p, &m) in mask.iter().enumerate() {
            if !m {
                prop_assert_eq!(&img.data()[p * 3..p * 3 + 3], &[1.0f32, 1.0, 1.0][..]);
            }
        }
    }

    #[test]
    fn reward_clipping_is_idempotent(r in -100.0f32..100.0, bound in 0.1f32..10.0) {
        let once = clip_reward(r, bound);
        prop_assert_eq!(clip_reward(once, bound), once);
        prop_assert!(once.abs() <= bound);
    }

    #[test]
    fn gradient_clipping_bounds_every_element(values in prop::collection::vec(-5000.0f32..5000.0, 1..40)) {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[values.len()])).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        grads.iter_mut().for_each(|(_, g)| g.data_mut().copy_from_slice(&values));
        clip_gradients(&mut grads, 1280.0).unwrap();
        for (&g, &v) in grads.get("w").unwrap().data().iter().zip(&values) {
            prop_assert!(g.abs() <= 1280.0);
            if v.abs() <= 1280.0 {
                prop_assert_eq!(g, v);
            }
        }
    }

    #[test]
    fn uniform_policy_has_maximal_entropy(logits in prop::collection::vec(-5.0f64..5.0, 2..8)) {
        let uniform = vec![0.0; logits.len()];
        prop_assert!(entropy(&uniform) >= entropy(&logits) - 1e-12);
    }

    #[test]
    fn overlay_brightness_is_monotone_in_attention(
        map in prop::collection::vec(0.0f32..1.0, 20),
        bump in prop::collection::vec(0.0f32..0.5, 20),
        alpha in 0.0f32..=1.0,
    ) {
        let frame = obs(3);
        let low = tensor32(&[5, 4], map.clone());
        let high = tensor32(&[5, 4], map.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect());
        let a = render_overlay(&frame, &[low], alpha).unwrap();
        let b = render_overlay(&frame, &[high], alpha).unwrap();
        prop_assert!(a.blended[0].data().iter().zip(b.blended[0].data()).all(|(x, y)| x <= y));
        let identity = render_overlay(&frame, &[tensor32(&[5, 4], map)], 0.0).unwrap();
        prop_assert_eq!(&identity.blended[0], &frame);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn queries_depend_on_state_alone(seed in 0u64..1000, a in 0u64..1000, b in 0u64..1000) {
        let (agent, params) = tiny(Variant::TopDown, seed);
        let state = agent.initial_state();
        let step = |o: &Tensor<f32>| {
            let input = StepInput { obs: o, prev_action: Some(1), prev_reward: 0.5 };
            agent.step(&params, &input, &state, StepOptions::default()).unwrap()
        };
        let (oa, ob) = (obs(a), obs(b));
        let (x, y) = (step(&oa), step(&ob));
        for (hx, hy) in x.heads.iter().zip(&y.heads) {
            prop_assert_eq!(&hx.query, &hy.query);
        }
    }

    #[test]
    fn l2_norm_key_heads_share_one_map(seed in 0u64..1000, o in 0u64..1000) {
        let (agent, params) = tiny(Variant::L2NormKey, seed);
        let frame = obs(o);
        let input = StepInput { obs: &frame, prev_action: None, prev_reward: 0.0 };
        let out = agent.step(&params, &input, &agent.initial_state(), StepOptions::default()).unwrap();
        prop_assert_eq!(out.heads.len(), 2);
        prop_assert_eq!(&out.heads[0].map, &out.heads[1].map);
    }

    #[test]
    fn replay_from_a_fresh_state_is_exact(seed in 0u64..1000, start in 0u64..1000) {
        let (agent, params) = tiny(Variant::TopDown, seed);
        let run = || {
            let mut state = agent.initial_state();
            let mut outs = Vec::new();
            for t in 0..4 {
                let frame = obs(start + t);
                let input = StepInput { obs: &frame, prev_action: Some(t as usize % 4), prev_reward: 0.0 };
                let out = agent.step(&params, &input, &state, StepOptions::default()).unwrap();
                state = out.state.clone();
                outs.push(out.logits);
            }
            (outs, state)
        };
        let (first, end) = run();
        let (second, _) = run();
        prop_assert_eq!(first, second);
        prop_assert!(end != agent.initial_state());
    }

    #[test]
    fn saliency_maps_are_non_negative(seed in 0u64..1000) {
        let (agent, params) = tiny(Variant::TopDown, seed);
        let env = env_for(agent.config());
        let mut frames = Vec::new();
        let mut prev_action = None;
        run_episode(&agent, &params, SpriteWorld::new(&env, seed).unwrap(), seed, &short_episodes(), |rec| {
            frames.push(Frame { obs: rec.obs.clone(), prev_action, prev_reward: 0.0 });
            prev_action = Some(rec.action);
            Ok(())
        })
        .unwrap();
        let probe = ProbeSpec { sigma: 1.5, stride: 4, strength: 1.0 };
        let pair = saliency_map(&AgentPolicy { agent: &agent, params: &params }, &frames, probe).unwrap();
        prop_assert!(pair.s_pi.data().iter().all(|&v| v >= 0.0));
        prop_assert!(pair.s_v.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_threshold_sweep_reproduces_plain_evaluation(seed in 0u64..1000) {
        let (agent, params) = tiny(Variant::TopDown, seed);
        let env = env_for(agent.config());
        let sweep = threshold_sweep(&agent, &params, &env, &[0.0], 3, seed, &short_episodes()).unwrap();
        let plain = evaluate(&agent, &params, &env, 3, seed, &short_episodes()).unwrap();
        prop_assert_eq!(&sweep.row(0.0).unwrap().scores, &plain);
    }

    #[test]
    fn empty_injection_script_gives_identical_twins(seed in 0u64..1000) {
        let (agent, params) = tiny(Variant::FixedQuery, seed);
        let env = env_for(agent.config());
        let report = injection_probe(&agent, &params, &env, &[], seed, &short_episodes()).unwrap();
        prop_assert!(report.twins_identical);
        prop_assert!(report.rewards_identical);
        prop_assert!(report.frames.iter().all(|f| f.divergence == 0.0 && !f.argmax_differs));
    }
}

#[test]
fn spatial_basis_is_deterministic() {
    assert_eq!(
        SpatialBasis::new(27, 20, 4, 4).unwrap().data(),
        SpatialBasis::new(27, 20, 4, 4).unwrap().data()
    );
}
