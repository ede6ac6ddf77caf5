//! Object queries refining pixel features through foreground/background
//! masked attention.
//!
//! Every block restricts the first `N/2` queries to pixels its auxiliary mask
//! calls foreground and the remaining queries to the complement. Pixel
//! features then read back from the queries. The output `R_L` replaces the
//! memory readout `R_0` as input to the decoder.

mod block;
mod cross_attention;
mod mask;

pub use block::{BlockOutput, ObjectTransformerBlock, QueryFfn, QuerySelfAttention};
pub use cross_attention::{CrossAttention, CrossAttentionCache, CrossAttentionGrads, CrossAttentionPass};
pub use mask::{build_attention_mask, AuxMaskHead};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Init, Linear, ParamRegistry, ParamSpec};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct ObjectTransformer<T: Element = f32> {
    /// Learned initial queries `X` (`N×C`).
    pub queries: Tensor<T>,
    /// Learned query position embedding `E_X` (`N×C`).
    pub query_pe: Tensor<T>,
    /// Maps the object summary to a query position embedding.
    pub object_embed: Linear<T>,
    /// Maps the memory readout to a pixel position embedding.
    pub pixel_embed: Linear<T>,
    pub blocks: Vec<ObjectTransformerBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct ObjectTransformerOutput<T: Element = f32> {
    /// `R_L`, same shape as the input readout.
    pub pixels: Tensor<T>,
    /// `X_L`.
    pub queries: Tensor<T>,
    /// Per block: auxiliary mask and query-to-pixel attention per head.
    pub blocks: Vec<BlockTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockTrace<T: Element = f32> {
    pub aux_mask: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

impl<T: Element> ObjectTransformer<T> {
    pub const PREFIX: &'static str = "object_transformer";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let p = Self::PREFIX;
        let (n, c) = (cfg.n_queries, cfg.dim);
        let mut s = vec![
            ParamSpec::new(join(p, "queries"), [n, c], Init::TruncNormal { std: 0.02 }),
            ParamSpec::new(join(p, "query_pe"), [n, c], Init::TruncNormal { std: 0.02 }),
        ];
        s.extend(Linear::<T>::specs(&join(p, "object_embed"), c, c));
        s.extend(Linear::<T>::specs(&join(p, "pixel_embed"), c, c));
        for l in 0..cfg.n_blocks {
            s.extend(ObjectTransformerBlock::<T>::specs(
                &join(p, &format!("block{l}")),
                c,
                cfg.query_ffn_hidden(),
            ));
        }
        s
    }

    pub fn load(reg: &ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let p = Self::PREFIX;
        let blocks = (0..cfg.n_blocks)
            .map(|l| ObjectTransformerBlock::load(reg, &join(p, &format!("block{l}")), cfg.n_heads, cfg.n_queries))
            .collect::<Result<_>>()?;
        Ok(Self {
            queries: reg.get(&join(p, "queries"))?.cast(),
            query_pe: reg.get(&join(p, "query_pe"))?.cast(),
            object_embed: Linear::load(reg, &join(p, "object_embed"))?,
            pixel_embed: Linear::load(reg, &join(p, "pixel_embed"))?,
            blocks,
        })
    }

    /// Runs all blocks on the readout `r0[HW×C]` laid out on `grid`, with
    /// `r_sin` the fixed sinusoidal embedding of that grid and `summary` the
    /// object memory readout `S[N×C]`.
    pub fn forward(
        &self,
        r0: &Tensor<T>,
        r_sin: &Tensor<T>,
        summary: &Tensor<T>,
        grid: (usize, usize),
    ) -> Result<ObjectTransformerOutput<T>> {
        let (hw, _) = r0.dims2()?;
        if hw != grid.0 * grid.1 {
            return Err(Error::dim(format!("{hw} pixel tokens on a {}×{} grid", grid.0, grid.1)));
        }
        r0.expect_same_shape(r_sin)?;
        summary.expect_same_shape(&self.queries)?;
        if self.blocks.is_empty() {
            return Ok(ObjectTransformerOutput {
                pixels: r0.clone(),
                queries: self.queries.add(summary)?,
                blocks: Vec::new(),
            });
        }
        let query_pe = self.query_pe.add(&self.object_embed.forward(summary)?)?;
        let pixel_pe = r_sin.add(&self.pixel_embed.forward(r0)?)?;
        let mut x = self.queries.add(summary)?;
        let mut r = r0.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(&x, &r, &query_pe, &pixel_pe, grid)?;
            x = out.queries;
            r = out.pixels;
            blocks.push(BlockTrace {
                aux_mask: out.aux_mask,
                attention: out.attention,
            });
        }
        Ok(ObjectTransformerOutput {
            pixels: r,
            queries: x,
            blocks,
        })
    }
}
