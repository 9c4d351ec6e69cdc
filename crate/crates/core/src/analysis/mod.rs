//! Interpretability tools: overlays, saliency, hard-threshold sweeps,
//! what/where decomposition and injection probes.

mod image;
mod injection;
mod overlay;
mod saliency;
mod sweep;
mod what_where;

pub use image::{ImageFormat, RgbImage};
pub use injection::{box_mass, default_script, injection_probe, InjectionReport, ProbeFrame, ScriptedSprite};
pub use overlay::{cell_of, render_overlay, upsample_nearest, OverlayFrame};
pub use saliency::{
    gaussian_blur, perturb, saliency_map, AgentPolicy, Frame, FramePolicy, ProbeSpec, SaliencyPair, WarmedProbe,
};
pub use sweep::{threshold_sweep, SweepReport, SweepRow};
pub use what_where::{what_where_image, what_where_report, WhatWhereFrame, WhatWhereReport};
