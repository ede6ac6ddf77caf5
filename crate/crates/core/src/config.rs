//! Architecture and inference constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network shape. Changing any field changes the parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pixel feature / object query width `C`.
    pub dim: usize,
    /// Memory key width `Ck`.
    pub key_dim: usize,
    /// Number of object queries `N`; the first half are foreground queries.
    pub n_queries: usize,
    /// Object transformer blocks `L`.
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Hidden width of the query FFN as a multiple of `dim`.
    pub query_ffn_mult: usize,
    pub decoder_dim: usize,
    pub stem_channels: usize,
    /// Backbone output channels at strides 4, 8 and 16.
    pub backbone_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            key_dim: 64,
            n_queries: 16,
            n_blocks: 3,
            n_heads: 8,
            query_ffn_mult: 8,
            decoder_dim: 128,
            stem_channels: 32,
            backbone_channels: [64, 128, 256],
        }
    }
}

impl ModelConfig {
    pub fn query_ffn_hidden(&self) -> usize {
        self.dim * self.query_ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("key_dim", self.key_dim),
            ("n_queries", self.n_queries),
            ("n_heads", self.n_heads),
            ("query_ffn_mult", self.query_ffn_mult),
            ("decoder_dim", self.decoder_dim),
            ("stem_channels", self.stem_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "dim {} must be a multiple of 4 for the positional embedding",
                self.dim
            )));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {}",
                self.n_heads, self.dim
            )));
        }
        if !self.n_queries.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_queries {} must be even (foreground/background halves)",
                self.n_queries
            )));
        }
        Ok(())
    }
}

/// Streaming policy. These can change between runs without touching weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// A memory frame is written every `mem_interval` frames.
    pub mem_interval: usize,
    /// Pixel memory capacity, pinned first frame included.
    pub t_max: usize,
    pub top_k: usize,
    /// Frames are scaled so the shorter edge is at most this many pixels.
    pub max_short_edge: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mem_interval: 5,
            t_max: 5,
            top_k: 30,
            max_short_edge: 480,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mem_interval == 0 {
            return Err(Error::Config("mem_interval must be positive".into()));
        }
        if self.t_max < 2 {
            return Err(Error::Config(format!(
                "t_max {} leaves no room beside the pinned first frame",
                self.t_max
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if self.max_short_edge < 16 {
            return Err(Error::Config(format!(
                "max_short_edge {} is below the network stride",
                self.max_short_edge
            )));
        }
        Ok(())
    }
}
