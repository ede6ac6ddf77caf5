use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel standardization applied after scaling 8-bit RGB to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameNormalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for FrameNormalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl FrameNormalization {
    /// Converts interleaved 8-bit RGB to a standardized `3×H×W` tensor.
    pub fn apply(&self, rgb: &[u8], height: usize, width: usize) -> Result<Tensor> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{} bytes for a {height}×{width} RGB image",
                rgb.len()
            )));
        }
        let plane = height * width;
        Tensor::new(
            [3, height, width],
            (0..3 * plane)
                .map(|i| {
                    let (c, p) = (i / plane, i % plane);
                    (rgb[p * 3 + c] as f32 / 255.0 - self.mean[c]) / self.std[c]
                })
                .collect(),
        )
    }
}

/// Decodes PNG or JPEG bytes into a standardized `3×H×W` tensor.
pub fn decode_frame(bytes: &[u8], norm: &FrameNormalization) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Format(format!("cannot decode frame: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    norm.apply(img.as_raw(), h as usize, w as usize)
}

pub fn read_frame(path: impl AsRef<Path>, norm: &FrameNormalization) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, norm).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}
