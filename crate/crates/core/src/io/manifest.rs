use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FrameNormalization;
use crate::config::{InferenceConfig, ModelConfig};
use crate::error::{Error, Result};

/// Every constant that determines a run's output, written next to the masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub engine_version: String,
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    /// Seed of the random initialization, when weights were not loaded.
    pub seed: Option<u64>,
    /// CRC32 of the weight file, when weights were loaded.
    pub weights_crc32: Option<u32>,
    pub normalization: FrameNormalization,
    pub resize_policy: String,
    pub interpolation: String,
    pub accumulation: String,
    pub argmax_tie_break: String,
}

impl RunManifest {
    pub fn new(model: ModelConfig, inference: InferenceConfig) -> Self {
        Self {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            resize_policy: format!(
                "shorter edge scaled to at most {} px, both sides rounded up to a multiple of 16; \
                 probabilities resized back before argmax",
                inference.max_short_edge
            ),
            model,
            inference,
            seed: None,
            weights_crc32: None,
            normalization: FrameNormalization::default(),
            interpolation: "bilinear, half-pixel centers (align_corners=false), no antialiasing".into(),
            accumulation: "f64, fixed ascending order".into(),
            argmax_tie_break: "lowest label wins (background first)".into(),
        }
    }

    /// Pretty JSON with fields in declaration order; equal manifests give
    /// identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest is always serializable");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("invalid manifest: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
