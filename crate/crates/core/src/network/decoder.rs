use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{join, Conv2d, ParamRegistry, ParamSpec, ResBlock};
use crate::tensor::{bilinear_resize, tokens_to_chw, Tensor};

/// Upsampling decoder from stride 16 to a full-resolution logit map.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub in_proj: Conv2d,
    pub skip8: Conv2d,
    pub skip4: Conv2d,
    pub up8: ResBlock,
    pub up4: ResBlock,
    pub last: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `1×H×W` logits at the network input resolution.
    pub logits: Tensor,
    /// Decoder features at strides 16, 8 and 4.
    pub features: [Tensor; 3],
}

impl Decoder {
    pub const PREFIX: &'static str = "decoder";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let p = Self::PREFIX;
        let d = cfg.decoder_dim;
        let [c4, c8, _] = cfg.backbone_channels;
        let mut s = Conv2d::<f32>::specs(&join(p, "in_proj"), cfg.dim, d, 1);
        s.extend(Conv2d::<f32>::specs(&join(p, "skip8"), c8, d, 1));
        s.extend(Conv2d::<f32>::specs(&join(p, "skip4"), c4, d, 1));
        s.extend(ResBlock::<f32>::specs(&join(p, "up8"), d, d, false));
        s.extend(ResBlock::<f32>::specs(&join(p, "up4"), d, d, false));
        s.extend(Conv2d::<f32>::specs(&join(p, "final"), d, 1, 3));
        s
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        let p = Self::PREFIX;
        Ok(Self {
            in_proj: Conv2d::load(reg, &join(p, "in_proj"), 1)?,
            skip8: Conv2d::load(reg, &join(p, "skip8"), 1)?,
            skip4: Conv2d::load(reg, &join(p, "skip4"), 1)?,
            up8: ResBlock::load(reg, &join(p, "up8"), false)?,
            up4: ResBlock::load(reg, &join(p, "up4"), false)?,
            last: Conv2d::load(reg, &join(p, "final"), 1)?,
        })
    }

    /// `pixels` are `HW×C` tokens on the stride-16 `grid`; `f8` and `f4` are
    /// backbone skips; `out` is the network input resolution.
    pub fn forward(
        &self,
        pixels: &Tensor,
        grid: (usize, usize),
        f8: &Tensor,
        f4: &Tensor,
        out: (usize, usize),
    ) -> Result<DecoderOutput> {
        let g16 = self.in_proj.forward(&tokens_to_chw(pixels, grid.0, grid.1)?)?;
        let up = |x: &Tensor, skip: &Conv2d, f: &Tensor, block: &ResBlock| -> Result<Tensor> {
            let (_, h, w) = f.dims3()?;
            block.forward(&bilinear_resize(x, h, w)?.add(&skip.forward(f)?)?)
        };
        let g8 = up(&g16, &self.skip8, f8, &self.up8)?;
        let g4 = up(&g8, &self.skip4, f4, &self.up4)?;
        let logits = bilinear_resize(&self.last.forward(&g4)?, out.0, out.1)?;
        Ok(DecoderOutput {
            logits,
            features: [g16, g8, g4],
        })
    }
}
