use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ParamRegistry, ParamSpec, ResBlock};
use crate::tensor::{chw_to_tokens, concat_channels, softplus, sigmoid, Tensor};

/// Strided convolutional encoder producing features at strides 4, 8 and 16:
/// a stride-2 stem, then three stages of stride-2 convolution plus a
/// residual block.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stages: [(Conv2d, ResBlock); 3],
}

/// Backbone features, each `C×H×W`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
}

impl Backbone {
    pub fn specs(prefix: &str, in_channels: usize, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut s = Conv2d::<f32>::specs(&join(prefix, "stem"), in_channels, cfg.stem_channels, 3);
        let mut cin = cfg.stem_channels;
        for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
            let stage = join(prefix, &format!("stage{i}"));
            s.extend(Conv2d::<f32>::specs(&join(&stage, "down"), cin, cout, 3));
            s.extend(ResBlock::<f32>::specs(&join(&stage, "block"), cout, cout, false));
            cin = cout;
        }
        s
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        let stage = |i: usize| -> Result<(Conv2d, ResBlock)> {
            let p = join(prefix, &format!("stage{i}"));
            Ok((
                Conv2d::load(reg, &join(&p, "down"), 2)?,
                ResBlock::load(reg, &join(&p, "block"), false)?,
            ))
        };
        Ok(Self {
            stem: Conv2d::load(reg, &join(prefix, "stem"), 2)?,
            stages: [stage(0)?, stage(1)?, stage(2)?],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Pyramid> {
        let (_, h, w) = x.dims3()?;
        if h < 16 || w < 16 {
            return Err(Error::Input(format!("image {h}×{w} is smaller than the 16-pixel stride")));
        }
        let mut f = self.stem.forward(x)?;
        let mut outs = Vec::with_capacity(3);
        for (down, block) in &self.stages {
            f = block.forward(&down.forward(&f)?)?;
            outs.push(f.clone());
        }
        let f16 = outs.pop().expect("three stages");
        let f8 = outs.pop().expect("three stages");
        let f4 = outs.pop().expect("three stages");
        Ok(Pyramid { f4, f8, f16 })
    }
}

/// What the query encoder extracts from one frame.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub pyramid: Pyramid,
    /// Stride-16 grid `(H, W)`.
    pub grid: (usize, usize),
    /// `HW×Ck`; serves both as this frame's query and, if memorized, its key.
    pub key: Tensor,
    /// `HW`, in `[1, ∞)`.
    pub shrinkage: Tensor,
    /// `HW×Ck`, in `[0, 1]`.
    pub selection: Tensor,
}

#[derive(Debug, Clone)]
pub struct QueryEncoder {
    pub backbone: Backbone,
    pub key_proj: Conv2d,
    pub shrinkage_proj: Conv2d,
    pub selection_proj: Conv2d,
}

impl QueryEncoder {
    pub const PREFIX: &'static str = "query_encoder";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let p = Self::PREFIX;
        let c16 = cfg.backbone_channels[2];
        let mut s = Backbone::specs(&join(p, "backbone"), 3, cfg);
        s.extend(Conv2d::<f32>::specs(&join(p, "key_proj"), c16, cfg.key_dim, 3));
        s.extend(Conv2d::<f32>::specs(&join(p, "shrinkage_proj"), c16, 1, 3));
        s.extend(Conv2d::<f32>::specs(&join(p, "selection_proj"), c16, cfg.key_dim, 3));
        s
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        let p = Self::PREFIX;
        Ok(Self {
            backbone: Backbone::load(reg, &join(p, "backbone"))?,
            key_proj: Conv2d::load(reg, &join(p, "key_proj"), 1)?,
            shrinkage_proj: Conv2d::load(reg, &join(p, "shrinkage_proj"), 1)?,
            selection_proj: Conv2d::load(reg, &join(p, "selection_proj"), 1)?,
        })
    }

    /// `image` is a normalized `3×H×W` frame at network resolution.
    pub fn forward(&self, image: &Tensor) -> Result<QueryFeatures> {
        if image.rank() != 3 || image.dim(0) != 3 {
            return Err(Error::Input(format!("expected a 3×H×W image, got {:?}", image.shape())));
        }
        let pyramid = self.backbone.forward(image)?;
        let (_, h, w) = pyramid.f16.dims3()?;
        let key = chw_to_tokens(&self.key_proj.forward(&pyramid.f16)?)?;
        let shrinkage = self.shrinkage_proj.forward(&pyramid.f16)?.map_f64(|v| 1.0 + softplus(v));
        let selection = chw_to_tokens(&self.selection_proj.forward(&pyramid.f16)?)?.map_f64(sigmoid);
        Ok(QueryFeatures {
            grid: (h, w),
            key,
            shrinkage: shrinkage.reshape([h * w])?,
            selection,
            pyramid,
        })
    }
}

/// Encodes an image with one object's mask into that object's memory value.
///
/// Input channels are the image, the target mask and the sum of all other
/// objects' masks. The stride-16 result and the query encoder's stride-16
/// feature are each projected to `C`, added, and refined by two residual
/// blocks.
#[derive(Debug, Clone)]
pub struct MaskEncoder {
    pub backbone: Backbone,
    pub mask_proj: Conv2d,
    pub query_proj: Conv2d,
    pub fuser: [ResBlock; 2],
}

impl MaskEncoder {
    pub const PREFIX: &'static str = "mask_encoder";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let p = Self::PREFIX;
        let c16 = cfg.backbone_channels[2];
        let mut s = Backbone::specs(&join(p, "backbone"), 5, cfg);
        s.extend(Conv2d::<f32>::specs(&join(p, "mask_proj"), c16, cfg.dim, 1));
        s.extend(Conv2d::<f32>::specs(&join(p, "query_proj"), c16, cfg.dim, 1));
        for i in 0..2 {
            s.extend(ResBlock::<f32>::specs(&join(p, &format!("fuser.block{i}")), cfg.dim, cfg.dim, false));
        }
        s
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        let p = Self::PREFIX;
        Ok(Self {
            backbone: Backbone::load(reg, &join(p, "backbone"))?,
            mask_proj: Conv2d::load(reg, &join(p, "mask_proj"), 1)?,
            query_proj: Conv2d::load(reg, &join(p, "query_proj"), 1)?,
            fuser: [
                ResBlock::load(reg, &join(p, "fuser.block0"), false)?,
                ResBlock::load(reg, &join(p, "fuser.block1"), false)?,
            ],
        })
    }

    /// `target` and `others` are `1×H×W` masks in `[0, 1]` matching `image`.
    /// Returns the `C×H/16×W/16` value.
    pub fn forward(&self, image: &Tensor, target: &Tensor, others: &Tensor, query_f16: &Tensor) -> Result<Tensor> {
        let (_, h, w) = image.dims3()?;
        for (name, m) in [("target", target), ("others", others)] {
            if m.shape() != [1, h, w] {
                return Err(Error::Input(format!(
                    "{name} mask {:?} does not match image {h}×{w}",
                    m.shape()
                )));
            }
        }
        let f16 = self.backbone.forward(&concat_channels(&[image, target, others])?)?.f16;
        let x = self.mask_proj.forward(&f16)?.add(&self.query_proj.forward(query_f16)?)?;
        self.fuser[1].forward(&self.fuser[0].forward(&x)?)
    }
}
