//! Pixel memory: per-pixel keys and values of past frames, read by
//! anisotropic-L2 attention with top-k filtering, plus the recurrent hidden
//! state added to every readout.

mod bank;
mod similarity;

pub use bank::{MemoryFrame, MemoryLane, PixelMemoryBank};
pub use similarity::{affinity, similarity, Affinity};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvGru, ParamRegistry, ParamSpec, ResBlock};
use crate::tensor::{area_resize, chw_to_tokens, tokens_to_chw, Element, Tensor};

/// `R_0 = fuse(A·v + h)` where `fuse` is two residual blocks with channel
/// attention.
#[derive(Debug, Clone)]
pub struct PixelReadout<T: Element = f32> {
    pub fuse: [ResBlock<T>; 2],
}

impl<T: Element> PixelReadout<T> {
    pub const PREFIX: &'static str = "pixel_memory.fuse";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        (0..2)
            .flat_map(|i| ResBlock::<T>::specs(&join(Self::PREFIX, &format!("block{i}")), cfg.dim, cfg.dim, true))
            .collect()
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            fuse: [
                ResBlock::load(reg, &join(Self::PREFIX, "block0"), true)?,
                ResBlock::load(reg, &join(Self::PREFIX, "block1"), true)?,
            ],
        })
    }

    /// `read[HW×C]` is `A·v`; `hidden` is `C×H×W`. Returns `HW×C` tokens.
    pub fn forward(&self, read: &Tensor<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = hidden.dims3()?;
        let x = tokens_to_chw(read, h, w)?.add(hidden)?;
        let x = self.fuse[1].forward(&self.fuse[0].forward(&x)?)?;
        chw_to_tokens(&x)
    }
}

/// Per-frame hidden-state update from the decoder's features at strides 16,
/// 8 and 4: each is area-downsampled to stride 16, projected to `C` by a 1×1
/// convolution, and the sum drives a convolutional GRU.
#[derive(Debug, Clone)]
pub struct SensoryUpdate<T: Element = f32> {
    pub proj: [Conv2d<T>; 3],
    pub gru: ConvGru<T>,
}

impl<T: Element> SensoryUpdate<T> {
    pub const PREFIX: &'static str = "pixel_memory.sensory";
    const SCALES: [&'static str; 3] = ["proj16", "proj8", "proj4"];

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut s: Vec<ParamSpec> = Self::SCALES
            .iter()
            .flat_map(|p| Conv2d::<T>::specs(&join(Self::PREFIX, p), cfg.decoder_dim, cfg.dim, 1))
            .collect();
        s.extend(ConvGru::<T>::specs(&join(Self::PREFIX, "gru"), cfg.dim, cfg.dim));
        s
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        let proj = |i: usize| Conv2d::load(reg, &join(Self::PREFIX, Self::SCALES[i]), 1);
        Ok(Self {
            proj: [proj(0)?, proj(1)?, proj(2)?],
            gru: ConvGru::load(reg, &join(Self::PREFIX, "gru"))?,
        })
    }

    /// `feats` are decoder features at strides 16, 8, 4; `h` is `C×H×W` at
    /// stride 16.
    pub fn forward(&self, h: &Tensor<T>, feats: [&Tensor<T>; 3]) -> Result<Tensor<T>> {
        let (_, gh, gw) = h.dims3()?;
        let mut x: Option<Tensor<T>> = None;
        for (proj, f) in self.proj.iter().zip(feats) {
            let p = proj.forward(&area_resize(f, gh, gw)?)?;
            x = Some(match x {
                Some(acc) => acc.add(&p)?,
                None => p,
            });
        }
        self.gru.forward(h, &x.expect("three scales"))
    }
}

/// Hidden-state refresh from the memory value when a memory frame is written.
/// Uses its own GRU, separate from the per-frame update.
#[derive(Debug, Clone)]
pub struct DeepUpdate<T: Element = f32> {
    pub gru: ConvGru<T>,
}

impl<T: Element> DeepUpdate<T> {
    pub const PREFIX: &'static str = "pixel_memory.deep_update";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        ConvGru::<T>::specs(&join(Self::PREFIX, "gru"), cfg.dim, cfg.dim)
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            gru: ConvGru::load(reg, &join(Self::PREFIX, "gru"))?,
        })
    }

    pub fn forward(&self, h: &Tensor<T>, value: &Tensor<T>) -> Result<Tensor<T>> {
        if h.shape() != value.shape() {
            return Err(Error::dim(format!(
                "deep update of hidden {:?} with value {:?}",
                h.shape(),
                value.shape()
            )));
        }
        self.gru.forward(h, value)
    }
}
