use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayFrame {
    pub base: Tensor<f32>,
    /// Per head, H×W.
    pub upsampled: Vec<Tensor<f32>>,
    /// Per head, H×W×3.
    pub blended: Vec<Tensor<f32>>,
}

/// Map cell covering pixel `p` along an axis of `pixels` split into `cells`.
pub fn cell_of(p: usize, pixels: usize, cells: usize) -> usize {
    p * cells / pixels
}

/// Nearest-neighbour upsampling of an h×w map to H×W.
pub fn upsample_nearest(map: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("upsample_nearest", format!("expected h×w map, got {:?}", map.shape())));
    };
    if h > height || w > width {
        return Err(Error::shape(
            "upsample_nearest",
            format!("map {h}x{w} larger than frame {height}x{width}"),
        ));
    }
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let row = cell_of(r, height, h);
        for c in 0..width {
            out.push(map.data()[row * w + cell_of(c, width, w)]);
        }
    }
    Tensor::new(vec![height, width], out)
}

/// Darken each pixel by `1 - alpha (1 - A)` so attended cells stay bright.
pub fn render_overlay(obs: &Tensor<f32>, head_maps: &[Tensor<f32>], alpha: f32) -> Result<OverlayFrame> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let &[height, width, 3] = obs.shape() else {
        return Err(Error::shape("render_overlay", format!("expected H×W×3 frame, got {:?}", obs.shape())));
    };
    let mut upsampled = Vec::with_capacity(head_maps.len());
    let mut blended = Vec::with_capacity(head_maps.len());
    for map in head_maps {
        let up = upsample_nearest(map, height, width)?;
        let mut img = obs.clone();
        for (px, a) in img.data_mut().chunks_mut(3).zip(up.data()) {
            let factor = 1.0 - alpha * (1.0 - a);
            px.iter_mut().for_each(|v| *v *= factor);
        }
        upsampled.push(up);
        blended.push(img);
    }
    Ok(OverlayFrame {
        base: obs.clone(),
        upsampled,
        blended,
    })
}
