//! Top-level JSON configuration with `key.path=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{AgentConfig, Variant};
use crate::analysis::{ImageFormat, ProbeSpec, ScriptedSprite};
use crate::envs::{EnvSpec, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Overlay darkening strength in [0, 1].
    pub alpha: f32,
    pub probe: ProbeSpec,
    /// Unperturbed frames fed before the probed frame.
    pub warm_frames: usize,
    pub thresholds: Vec<f64>,
    /// Episodes per evaluation / per threshold.
    pub episodes: usize,
    /// Frames written by the overlay and what/where commands.
    pub frames: usize,
    pub image_format: ImageFormat,
    /// Integer upscaling of written images.
    pub image_scale: usize,
    /// Agent-step cap for analysis episodes.
    pub max_agent_steps: usize,
    /// Sprites spliced in by `inject-probe`; empty means the default
    /// left-edge enemy.
    pub inject_script: Vec<ScriptedSprite>,
    /// Write every observation of the first evaluation episode.
    pub dump_frames: bool,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alpha: 0.6,
            probe: ProbeSpec::default(),
            warm_frames: 100,
            thresholds: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
            episodes: 15,
            frames: 20,
            image_format: ImageFormat::Png,
            image_scale: 4,
            max_agent_steps: 250,
            inject_script: Vec::new(),
            dump_frames: false,
            seed: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub agent: AgentConfig,
    pub env: EnvSpec,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            agent: AgentConfig::toy(NUM_ACTIONS, Variant::TopDown),
            env: EnvSpec::collector(),
            train: TrainConfig::toy(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl Config {
    /// Parse JSON text, apply `key.path=value` overrides, then validate.
    pub fn from_json_with(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("config: top level must be an object".into()));
        }
        let mut value = serde_json::to_value(Config::default())?;
        merge(&mut value, user);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Config = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.train.validate()?;
        if self.agent.num_actions > NUM_ACTIONS {
            return Err(Error::Config(format!(
                "agent.num_actions {} exceeds the {NUM_ACTIONS} sprite-world actions",
                self.agent.num_actions
            )));
        }
        if (self.agent.obs_height, self.agent.obs_width, self.agent.obs_channels) != (self.env.height, self.env.width, 3) {
            return Err(Error::Config(format!(
                "agent expects {}x{}x{} frames but env renders {}x{}x3",
                self.agent.obs_height, self.agent.obs_width, self.agent.obs_channels, self.env.height, self.env.width
            )));
        }
        crate::envs::SpriteWorld::new(&self.env, 0)?;
        if !(0.0..=1.0).contains(&self.analysis.alpha) {
            return Err(Error::Config("analysis.alpha must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Recursively overlay `top` onto `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override `{assignment}`: `{}` is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}
