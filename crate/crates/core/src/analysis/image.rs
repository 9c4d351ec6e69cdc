use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// From an H×W×3 tensor in [0, 1]; values are clamped.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[h, w, 3] = t.shape() else {
            return Err(Error::shape("rgb_image", format!("expected H×W×3, got {:?}", t.shape())));
        };
        Ok(RgbImage {
            height: h,
            width: w,
            pixels: t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        })
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let (h, w) = (self.height * factor, self.width * factor);
        let mut pixels = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let base = ((r / factor) * self.width + c / factor) * 3;
                pixels.extend_from_slice(&self.pixels[base..base + 3]);
            }
        }
        RgbImage { height: h, width: w, pixels }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
        Ok(())
    }

    /// Binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        write!(file, "P6\n{} {}\n255\n", self.width, self.height)?;
        file.write_all(&self.pixels)?;
        file.flush()?;
        Ok(())
    }

    /// PNG unless the extension is `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => self.save_ppm(path),
            _ => self.save_png(path),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}
