use proptest::prelude::*;
use topdown_attention::envs::{
    ActionRepeat, EnvSpec, Environment, Sprite, SpriteKind, SpriteWorld, ENEMY_COLOR, NUM_ACTIONS,
};

fn specs() -> Vec<EnvSpec> {
    vec![EnvSpec::collector(), EnvSpec::corridor_dodge(), EnvSpec::cue_collector()]
}

fn actions(seed: u64, n: usize) -> Vec<usize> {
    // small LCG so the action stream is independent of the env's rng
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 33) % NUM_ACTIONS as u64) as usize
        })
        .collect()
}

#[test]
fn same_seed_same_trajectory() {
    for spec in specs() {
        let mut a = SpriteWorld::new(&spec, 42).unwrap();
        let mut b = SpriteWorld::new(&spec, 42).unwrap();
        for act in actions(3, 300) {
            if a.is_done() {
                break;
            }
            assert_eq!(a.step(act).unwrap(), b.step(act).unwrap());
        }
        assert_eq!(a.sprites(), b.sprites());
    }
}

#[test]
fn injected_sprite_changes_pixels_only() {
    for spec in specs() {
        let mut clean = SpriteWorld::new(&spec, 9).unwrap();
        let mut injected = SpriteWorld::new(&spec, 9).unwrap();
        let mut ghost = Sprite::new(SpriteKind::Injected, [spec.height as f32 / 2.0, 0.0], spec.sprite_size, ENEMY_COLOR);
        ghost.vel = [0.0, 0.5];
        injected.inject_sprite(ghost).unwrap();
        let mut pixels_differed = false;
        for act in actions(5, 100) {
            if clean.is_done() {
                break;
            }
            let c = clean.step(act).unwrap();
            let i = injected.step(act).unwrap();
            assert_eq!(c.reward.to_bits(), i.reward.to_bits());
            assert_eq!(c.done, i.done);
            pixels_differed |= c.observation != i.observation;
            let real = |w: &SpriteWorld| -> Vec<Sprite> {
                w.sprites().iter().filter(|s| s.kind != SpriteKind::Injected).cloned().collect()
            };
            assert_eq!(real(&clean), real(&injected));
        }
        assert!(pixels_differed);
        assert_eq!(clean.score(), injected.score());
    }
}

#[test]
fn only_injected_sprites_can_be_spliced() {
    let mut w = SpriteWorld::new(&EnvSpec::collector(), 0).unwrap();
    let enemy = Sprite::new(SpriteKind::Enemy, [0.0, 0.0], 4, ENEMY_COLOR);
    assert!(w.inject_sprite(enemy).is_err());
}

#[test]
fn reset_through_the_trait_matches_a_fresh_world() {
    let spec = EnvSpec::collector();
    let mut w = SpriteWorld::new(&spec, 1).unwrap();
    for act in actions(1, 20) {
        if w.is_done() {
            break;
        }
        w.step(act).unwrap();
    }
    let obs = Environment::reset(&mut w, 77).unwrap();
    assert_eq!(obs, SpriteWorld::new(&spec, 77).unwrap().render());
    assert_eq!(w.steps(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn observations_stay_in_unit_range_and_rewards_bounded(seed in 0u64..10_000, which in 0usize..3, aseed in 0u64..1000) {
        let spec = specs().swap_remove(which);
        let mut w = SpriteWorld::new(&spec, seed).unwrap();
        let obs = w.render();
        prop_assert_eq!(obs.shape(), &[spec.height, spec.width, 3]);
        for act in actions(aseed, 200) {
            if w.is_done() {
                break;
            }
            let r = w.step(act).unwrap();
            prop_assert!(r.observation.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // at most one enemy hit plus a few pickups and the survival bonus per frame
            prop_assert!(r.reward >= -1.0 - 1e-6 && r.reward <= 3.0 + 1e-6);
        }
    }

    #[test]
    fn action_repeat_sums_inner_rewards(seed in 0u64..10_000, k in 1usize..6, aseed in 0u64..1000) {
        let spec = EnvSpec::collector();
        let mut wrapped = ActionRepeat::new(SpriteWorld::new(&spec, seed).unwrap(), k).unwrap();
        let mut plain = SpriteWorld::new(&spec, seed).unwrap();
        for act in actions(aseed, 40) {
            let r = wrapped.step(act).unwrap();
            let mut total = 0.0f32;
            let mut done = false;
            for _ in 0..k {
                let s = plain.step(act).unwrap();
                total += s.reward;
                done = s.done;
                if done {
                    break;
                }
            }
            prop_assert_eq!(r.reward, total);
            prop_assert_eq!(r.done, done);
            prop_assert_eq!(&r.observation, &plain.render());
            if done {
                break;
            }
        }
    }

    #[test]
    fn player_stays_inside_the_frame(seed in 0u64..10_000, aseed in 0u64..1000) {
        let spec = EnvSpec::collector();
        let mut w = SpriteWorld::new(&spec, seed).unwrap();
        for act in actions(aseed, 300) {
            if w.is_done() {
                break;
            }
            w.step(act).unwrap();
            let (t, l, b, r) = w.player().pixel_box();
            prop_assert!(t >= 0 && l >= 0 && b <= spec.height as i64 && r <= spec.width as i64);
        }
    }
}
