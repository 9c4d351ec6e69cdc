use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    Player,
    Enemy,
    Projectile,
    Collectible,
    /// Pixel-level splice: drawn, but never touches rewards or dynamics.
    Injected,
    /// Episode-start signal band used by the cue collector.
    Cue,
}

/// Axis-aligned filled rectangle with constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub kind: SpriteKind,
    /// Top-left corner, (row, col) in pixels.
    pub pos: [f32; 2],
    /// (drow, dcol) per environment step.
    pub vel: [f32; 2],
    pub color: [u8; 3],
    /// (height, width) in pixels.
    pub size: [usize; 2],
    /// Sub-kind, e.g. which collectible colour in the cue collector.
    #[serde(default)]
    pub tag: u8,
}

impl Sprite {
    pub fn new(kind: SpriteKind, pos: [f32; 2], size: usize, color: [u8; 3]) -> Self {
        Sprite {
            kind,
            pos,
            vel: [0.0, 0.0],
            color,
            size: [size, size],
            tag: 0,
        }
    }

    pub fn with_velocity(mut self, vel: [f32; 2]) -> Self {
        self.vel = vel;
        self
    }

    /// Integer pixel box `(top, left, bottom, right)`, end-exclusive.
    pub fn pixel_box(&self) -> (i64, i64, i64, i64) {
        let top = self.pos[0].floor() as i64;
        let left = self.pos[1].floor() as i64;
        (top, left, top + self.size[0] as i64, left + self.size[1] as i64)
    }

    pub fn overlaps(&self, other: &Sprite) -> bool {
        let (t1, l1, b1, r1) = self.pixel_box();
        let (t2, l2, b2, r2) = other.pixel_box();
        t1 < b2 && t2 < b1 && l1 < r2 && l2 < r1
    }
}

pub const PLAYER_COLOR: [u8; 3] = [80, 160, 255];
pub const ENEMY_COLOR: [u8; 3] = [255, 60, 60];
pub const COLLECTIBLE_COLOR: [u8; 3] = [255, 220, 0];
pub const PROJECTILE_COLOR: [u8; 3] = [255, 140, 0];
/// Colours of the cue collector's item kinds, indexed by tag.
pub const KIND_PALETTE: [[u8; 3]; 4] = [[0, 220, 0], [255, 0, 255], [0, 230, 230], [255, 220, 0]];
