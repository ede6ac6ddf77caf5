//! The full segmentation network and the streaming session that drives it.

mod aggregate;
mod decoder;
mod encoder;
mod session;

pub use aggregate::{argmax_labels, soft_aggregate, CLAMP};
pub use decoder::{Decoder, DecoderOutput};
pub use encoder::{Backbone, MaskEncoder, Pyramid, QueryEncoder, QueryFeatures};
pub use session::{ObjectTrace, Session, StepOutput};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamRegistry, ParamSpec};
use crate::object_memory::ObjectMemoryEncoder;
use crate::object_transformer::ObjectTransformer;
use crate::pixel_memory::{DeepUpdate, PixelReadout, SensoryUpdate};

/// Every learned component, loaded from one parameter registry.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub query_encoder: QueryEncoder,
    pub mask_encoder: MaskEncoder,
    pub pixel_readout: PixelReadout,
    pub sensory_update: SensoryUpdate,
    pub deep_update: DeepUpdate,
    pub object_memory: ObjectMemoryEncoder,
    pub object_transformer: ObjectTransformer,
    pub decoder: Decoder,
}

impl Network {
    /// The complete parameter set for `cfg`, sorted by name.
    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut s = QueryEncoder::specs(cfg);
        s.extend(MaskEncoder::specs(cfg));
        s.extend(PixelReadout::<f32>::specs(cfg));
        s.extend(SensoryUpdate::<f32>::specs(cfg));
        s.extend(DeepUpdate::<f32>::specs(cfg));
        s.extend(ObjectMemoryEncoder::<f32>::specs(cfg));
        s.extend(ObjectTransformer::<f32>::specs(cfg));
        s.extend(Decoder::specs(cfg));
        s.sort_by(|a, b| a.name.cmp(&b.name));
        s
    }

    /// Fails with a compatibility error listing every missing, unexpected or
    /// mis-shaped parameter when `reg` does not match `cfg` exactly.
    pub fn from_registry(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        reg.check_compatible(&Self::specs(cfg))?;
        Ok(Self {
            config: cfg.clone(),
            query_encoder: QueryEncoder::load(reg)?,
            mask_encoder: MaskEncoder::load(reg)?,
            pixel_readout: PixelReadout::load(reg)?,
            sensory_update: SensoryUpdate::load(reg)?,
            deep_update: DeepUpdate::load(reg)?,
            object_memory: ObjectMemoryEncoder::load(reg)?,
            object_transformer: ObjectTransformer::load(reg, cfg)?,
            decoder: Decoder::load(reg)?,
        })
    }

    /// Freshly initialized weights from `seed`.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<(ParamRegistry, Self)> {
        cfg.validate()?;
        let reg = ParamRegistry::initialize(&Self::specs(cfg), seed)?;
        let net = Self::from_registry(&reg, cfg)?;
        Ok((reg, net))
    }
}

/// Network input size for an `h×w` frame: the shorter edge is scaled down to
/// at most `max_short_edge` (never up), then both sides are rounded up to a
/// multiple of 16.
pub fn network_dims(h: usize, w: usize, max_short_edge: usize) -> Result<(usize, usize)> {
    if h < 16 || w < 16 {
        return Err(Error::Input(format!("frame {h}×{w} is smaller than 16 pixels on a side")));
    }
    let short = h.min(w);
    let scale = if short > max_short_edge {
        max_short_edge as f64 / short as f64
    } else {
        1.0
    };
    let fit = |v: usize| (((v as f64 * scale).round() as usize).max(16)).div_ceil(16) * 16;
    Ok((fit(h), fit(w)))
}
