use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sprite::{
    Sprite, SpriteKind, COLLECTIBLE_COLOR, ENEMY_COLOR, KIND_PALETTE, PLAYER_COLOR, PROJECTILE_COLOR,
};
use super::{Environment, StepResult, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rules {
    /// Move on the pixel grid, +1 per collectible, -1 and done on enemy contact.
    Collector,
    /// Projectiles fall down fixed lanes; +survive_reward per step, -1 and done on hit.
    CorridorDodge,
    /// Several collectible kinds; a colour band shown for the first
    /// `cue_steps` steps names the rewarded kind.
    CueCollector,
}

impl Rules {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "collector" => Ok(Rules::Collector),
            "corridor_dodge" => Ok(Rules::CorridorDodge),
            "cue_collector" => Ok(Rules::CueCollector),
            other => Err(Error::invalid(format!("unknown rules tag `{other}`"))),
        }
    }
}

/// Environment description as it appears in the JSON config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub rules: String,
    pub height: usize,
    pub width: usize,
    pub sprite_size: usize,
    /// Pixels per environment step.
    pub player_speed: f32,
    pub num_enemies: usize,
    pub enemy_speed: f32,
    /// Collectibles on screen (per kind for the cue collector).
    pub num_collectibles: usize,
    pub num_kinds: usize,
    pub cue_steps: usize,
    pub cue_rows: usize,
    pub wrong_kind_reward: f32,
    pub lanes: usize,
    pub projectile_speed: f32,
    pub spawn_prob: f32,
    pub survive_reward: f32,
    /// Environment steps before the episode is cut.
    pub episode_cap: usize,
    /// Minimum distance in pixels between the player and a fresh enemy.
    pub min_spawn_distance: f32,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            rules: "collector".into(),
            height: 40,
            width: 30,
            sprite_size: 4,
            player_speed: 1.0,
            num_enemies: 1,
            enemy_speed: 0.25,
            num_collectibles: 3,
            num_kinds: 3,
            cue_steps: 8,
            cue_rows: 2,
            wrong_kind_reward: -0.5,
            lanes: 5,
            projectile_speed: 1.0,
            spawn_prob: 0.05,
            survive_reward: 0.1,
            episode_cap: 1000,
            min_spawn_distance: 12.0,
        }
    }
}

impl EnvSpec {
    pub fn collector() -> Self {
        Self::default()
    }

    pub fn corridor_dodge() -> Self {
        EnvSpec {
            rules: "corridor_dodge".into(),
            num_enemies: 0,
            num_collectibles: 0,
            ..Self::default()
        }
    }

    pub fn cue_collector() -> Self {
        EnvSpec {
            rules: "cue_collector".into(),
            num_enemies: 0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<Rules> {
        let rules = Rules::parse(&self.rules)?;
        if self.height == 0 || self.width == 0 || self.sprite_size == 0 {
            return Err(Error::Config("env frame and sprite sizes must be positive".into()));
        }
        if self.sprite_size >= self.height || self.sprite_size >= self.width {
            return Err(Error::Config("sprites must fit inside the frame".into()));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("env.episode_cap must be positive".into()));
        }
        if rules == Rules::CueCollector && !(1..=KIND_PALETTE.len()).contains(&self.num_kinds) {
            return Err(Error::Config(format!(
                "env.num_kinds must be in 1..={}",
                KIND_PALETTE.len()
            )));
        }
        if rules == Rules::CorridorDodge && (self.lanes == 0 || self.width / self.lanes < self.sprite_size) {
            return Err(Error::Config("env.lanes must leave room for a sprite per lane".into()));
        }
        Ok(rules)
    }
}

/// Deterministic sprite-world state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteWorld {
    spec: EnvSpec,
    rules: Rules,
    sprites: Vec<Sprite>,
    score: f64,
    steps: usize,
    done: bool,
    /// Rewarded kind in the cue collector.
    target: u8,
    rng: ChaCha8Rng,
}

/// Build a fresh world for `seed` and return it with its first observation.
pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(SpriteWorld, Tensor<f32>)> {
    let world = SpriteWorld::new(spec, seed)?;
    let obs = world.render();
    Ok((world, obs))
}

impl SpriteWorld {
    pub fn new(spec: &EnvSpec, seed: u64) -> Result<Self> {
        let rules = spec.validate()?;
        let mut world = SpriteWorld {
            spec: spec.clone(),
            rules,
            sprites: Vec::new(),
            score: 0.0,
            steps: 0,
            done: false,
            target: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        world.layout();
        Ok(world)
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn rules(&self) -> Rules {
        self.rules
    }

    pub fn sprites(&self) -> &[Sprite] {
        &self.sprites
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn target_kind(&self) -> u8 {
        self.target
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn player(&self) -> &Sprite {
        self.sprites
            .iter()
            .find(|s| s.kind == SpriteKind::Player)
            .expect("world always has a player")
    }

    fn player_index(&self) -> usize {
        self.sprites
            .iter()
            .position(|s| s.kind == SpriteKind::Player)
            .expect("world always has a player")
    }

    /// First row sprites may occupy (below the cue band).
    fn play_top(&self) -> f32 {
        match self.rules {
            Rules::CueCollector => self.spec.cue_rows as f32,
            _ => 0.0,
        }
    }

    fn max_row(&self) -> f32 {
        (self.spec.height - self.spec.sprite_size) as f32
    }

    fn max_col(&self) -> f32 {
        (self.spec.width - self.spec.sprite_size) as f32
    }

    fn random_cell(&mut self) -> [f32; 2] {
        let top = self.play_top() as i64;
        let r = self.rng.random_range(top..=self.max_row() as i64);
        let c = self.rng.random_range(0..=self.max_col() as i64);
        [r as f32, c as f32]
    }

    /// Random position at least `min_dist` (Chebyshev) from every point in
    /// `avoid`; falls back to the last draw after a bounded number of tries.
    fn place(&mut self, avoid: &[[f32; 2]], min_dist: f32) -> [f32; 2] {
        let mut pos = self.random_cell();
        for _ in 0..64 {
            if avoid
                .iter()
                .all(|a| (a[0] - pos[0]).abs().max((a[1] - pos[1]).abs()) >= min_dist)
            {
                break;
            }
            pos = self.random_cell();
        }
        pos
    }

    fn occupied(&self) -> Vec<[f32; 2]> {
        self.sprites
            .iter()
            .filter(|s| !matches!(s.kind, SpriteKind::Injected | SpriteKind::Cue))
            .map(|s| s.pos)
            .collect()
    }

    fn layout(&mut self) {
        let size = self.spec.sprite_size;
        let gap = size as f32 + 1.0;
        match self.rules {
            Rules::Collector | Rules::CueCollector => {
                if self.rules == Rules::CueCollector {
                    self.target = self.rng.random_range(0..self.spec.num_kinds) as u8;
                    let mut cue = Sprite::new(SpriteKind::Cue, [0.0, 0.0], size, KIND_PALETTE[self.target as usize]);
                    cue.size = [self.spec.cue_rows, self.spec.width];
                    cue.tag = self.target;
                    if self.spec.cue_steps > 0 && self.spec.cue_rows > 0 {
                        self.sprites.push(cue);
                    }
                }
                let player_pos = self.random_cell();
                let kinds = if self.rules == Rules::CueCollector { self.spec.num_kinds } else { 1 };
                for kind in 0..kinds {
                    for _ in 0..self.spec.num_collectibles {
                        let mut avoid = self.occupied();
                        avoid.push(player_pos);
                        let pos = self.place(&avoid, gap);
                        let color = if self.rules == Rules::CueCollector {
                            KIND_PALETTE[kind]
                        } else {
                            COLLECTIBLE_COLOR
                        };
                        let mut s = Sprite::new(SpriteKind::Collectible, pos, size, color);
                        s.tag = kind as u8;
                        self.sprites.push(s);
                    }
                }
                for _ in 0..self.spec.num_enemies {
                    let pos = self.place(&[player_pos], self.spec.min_spawn_distance);
                    let angle = self.rng.random_range(0.0..std::f32::consts::TAU);
                    let vel = [angle.sin() * self.spec.enemy_speed, angle.cos() * self.spec.enemy_speed];
                    self.sprites
                        .push(Sprite::new(SpriteKind::Enemy, pos, size, ENEMY_COLOR).with_velocity(vel));
                }
                self.sprites
                    .push(Sprite::new(SpriteKind::Player, player_pos, size, PLAYER_COLOR));
            }
            Rules::CorridorDodge => {
                let col = self.rng.random_range(0..=self.max_col() as i64) as f32;
                self.sprites
                    .push(Sprite::new(SpriteKind::Player, [self.max_row(), col], size, PLAYER_COLOR));
            }
        }
    }

    /// Pixel-level splice of an `Injected` sprite.
    pub fn inject_sprite(&mut self, sprite: Sprite) -> Result<()> {
        if sprite.kind != SpriteKind::Injected {
            return Err(Error::invalid(format!(
                "only injected sprites can be spliced in, got {:?}",
                sprite.kind
            )));
        }
        self.sprites.push(sprite);
        Ok(())
    }

    /// Frame as H×W×3 in [0, 1]; a pure function of the sprite list.
    pub fn render(&self) -> Tensor<f32> {
        render_sprites(self.spec.height, self.spec.width, &self.sprites)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if action >= NUM_ACTIONS {
            return Err(Error::invalid(format!("action {action} out of range 0..{NUM_ACTIONS}")));
        }
        if self.done {
            return Err(Error::invalid("episode finished; reset required"));
        }
        let (dr, dc) = match action {
            1 => (-1.0, 0.0),
            2 => (1.0, 0.0),
            3 => (0.0, -1.0),
            4 => (0.0, 1.0),
            _ => (0.0, 0.0),
        };
        let speed = self.spec.player_speed;
        let (top, max_r, max_c) = (self.play_top(), self.max_row(), self.max_col());
        let pi = self.player_index();
        {
            let p = &mut self.sprites[pi];
            if self.rules != Rules::CorridorDodge {
                p.pos[0] = (p.pos[0] + dr * speed).clamp(top, max_r);
            }
            p.pos[1] = (p.pos[1] + dc * speed).clamp(0.0, max_c);
        }

        let (h, w) = (self.spec.height as f32, self.spec.width as f32);
        for s in self.sprites.iter_mut() {
            match s.kind {
                SpriteKind::Enemy => {
                    for axis in 0..2 {
                        let hi = if axis == 0 { max_r } else { max_c };
                        let lo = if axis == 0 { top } else { 0.0 };
                        let mut next = s.pos[axis] + s.vel[axis];
                        if next < lo || next > hi {
                            s.vel[axis] = -s.vel[axis];
                            next = next.clamp(lo, hi);
                        }
                        s.pos[axis] = next;
                    }
                }
                SpriteKind::Projectile => {
                    s.pos[0] += s.vel[0];
                    s.pos[1] += s.vel[1];
                }
                SpriteKind::Injected => {
                    s.pos[0] = (s.pos[0] + s.vel[0]).rem_euclid(h);
                    s.pos[1] = (s.pos[1] + s.vel[1]).rem_euclid(w);
                }
                _ => {}
            }
        }
        self.sprites
            .retain(|s| s.kind != SpriteKind::Projectile || s.pos[0] < h);

        let mut reward = 0.0f32;
        let player = self.sprites[self.player_index()].clone();
        let mut respawn = Vec::new();
        for (i, s) in self.sprites.iter().enumerate() {
            if !player.overlaps(s) {
                continue;
            }
            match s.kind {
                SpriteKind::Enemy | SpriteKind::Projectile => {
                    if !self.done {
                        reward -= 1.0;
                    }
                    self.done = true;
                }
                SpriteKind::Collectible => {
                    reward += match self.rules {
                        Rules::CueCollector if s.tag != self.target => self.spec.wrong_kind_reward,
                        _ => 1.0,
                    };
                    respawn.push(i);
                }
                _ => {}
            }
        }
        let gap = self.spec.sprite_size as f32 + 1.0;
        for i in respawn {
            let avoid = self.occupied();
            self.sprites[i].pos = self.place(&avoid, gap);
        }

        if self.rules == Rules::CorridorDodge {
            if !self.done {
                reward += self.spec.survive_reward;
            }
            if self.rng.random::<f32>() < self.spec.spawn_prob {
                let lane_w = self.spec.width / self.spec.lanes;
                let lane = self.rng.random_range(0..self.spec.lanes);
                let col = (lane * lane_w + (lane_w - self.spec.sprite_size) / 2) as f32;
                let size = self.spec.sprite_size;
                self.sprites.push(
                    Sprite::new(SpriteKind::Projectile, [-(size as f32), col], size, PROJECTILE_COLOR)
                        .with_velocity([self.spec.projectile_speed, 0.0]),
                );
            }
        }

        self.steps += 1;
        if self.rules == Rules::CueCollector && self.steps >= self.spec.cue_steps {
            self.sprites.retain(|s| s.kind != SpriteKind::Cue);
        }
        if self.steps >= self.spec.episode_cap {
            self.done = true;
        }
        self.score += reward as f64;
        Ok(StepResult {
            observation: self.render(),
            reward,
            done: self.done,
        })
    }
}

impl Environment for SpriteWorld {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        SpriteWorld::step(self, action)
    }

    fn observation(&self) -> Tensor<f32> {
        self.render()
    }

    fn reset(&mut self, seed: u64) -> Result<Tensor<f32>> {
        *self = SpriteWorld::new(&self.spec, seed)?;
        Ok(self.render())
    }
}

/// Draw filled rectangles in list order onto a black H×W×3 frame.
pub fn render_sprites(height: usize, width: usize, sprites: &[Sprite]) -> Tensor<f32> {
    let mut data = vec![0.0f32; height * width * 3];
    for s in sprites {
        let (top, left, bottom, right) = s.pixel_box();
        let rgb = s.color.map(|c| c as f32 / 255.0);
        for r in top.max(0)..bottom.min(height as i64) {
            for c in left.max(0)..right.min(width as i64) {
                let base = (r as usize * width + c as usize) * 3;
                data[base..base + 3].copy_from_slice(&rgb);
            }
        }
    }
    Tensor::new(vec![height, width, 3], data).expect("frame shape")
}
