use super::{build_attention_mask, AuxMaskHead, CrossAttention};
use crate::error::Result;
use crate::nn::{join, LayerNorm, Mlp, MultiHeadAttention, ParamRegistry, ParamSpec, ResBlock};
use crate::tensor::{chw_to_tokens, tokens_to_chw, Element, Tensor};

/// Pre-norm residual self-attention among object queries.
#[derive(Debug, Clone)]
pub struct QuerySelfAttention<T: Element = f32> {
    pub norm: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
}

impl<T: Element> QuerySelfAttention<T> {
    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        let mut s = LayerNorm::<T>::specs(&join(prefix, "norm"), dim);
        s.extend(MultiHeadAttention::<T>::specs(prefix, dim));
        s
    }

    pub fn load(reg: &ParamRegistry, prefix: &str, n_heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::load(reg, &join(prefix, "norm"))?,
            attn: MultiHeadAttention::load(reg, prefix, n_heads)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, pe: &Tensor<T>) -> Result<Tensor<T>> {
        let normed = self.norm.forward(x)?;
        let qk = normed.add(pe)?;
        x.add(&self.attn.forward(&qk, &qk, &normed, None)?.output)
    }
}

/// Pre-norm residual MLP over object queries.
#[derive(Debug, Clone)]
pub struct QueryFfn<T: Element = f32> {
    pub norm: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Element> QueryFfn<T> {
    pub fn specs(prefix: &str, dim: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut s = LayerNorm::<T>::specs(&join(prefix, "norm"), dim);
        s.extend(Mlp::<T>::specs(&join(prefix, "mlp"), dim, hidden, dim));
        s
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::load(reg, &join(prefix, "norm"))?,
            mlp: Mlp::load(reg, &join(prefix, "mlp"))?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.mlp.forward(&self.norm.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct BlockOutput<T: Element = f32> {
    /// Object queries `X_l` (`N×C`).
    pub queries: Tensor<T>,
    /// Pixel features `R_l` (`HW×C`).
    pub pixels: Tensor<T>,
    /// Auxiliary mask `M_l` (`HW`) that defined this block's attention mask.
    pub aux_mask: Tensor<T>,
    /// Query-to-pixel attention weights per head (`N×HW` each).
    pub attention: Vec<Tensor<T>>,
}

/// One object transformer block:
/// aux mask → masked cross-attention (queries read pixels) → query
/// self-attention → query FFN → reverse cross-attention (pixels read queries,
/// unmasked) → pixel FFN (residual conv block with channel attention, no
/// layer norm).
#[derive(Debug, Clone)]
pub struct ObjectTransformerBlock<T: Element = f32> {
    pub aux_mask: AuxMaskHead<T>,
    pub cross_attn: CrossAttention<T>,
    pub self_attn: QuerySelfAttention<T>,
    pub query_ffn: QueryFfn<T>,
    pub reverse_attn: CrossAttention<T>,
    pub pixel_ffn: ResBlock<T>,
    pub n_queries: usize,
}

impl<T: Element> ObjectTransformerBlock<T> {
    pub fn specs(prefix: &str, dim: usize, ffn_hidden: usize) -> Vec<ParamSpec> {
        let mut s = AuxMaskHead::<T>::specs(&join(prefix, "aux_mask"), dim);
        s.extend(CrossAttention::<T>::specs(&join(prefix, "cross_attn"), dim));
        s.extend(QuerySelfAttention::<T>::specs(&join(prefix, "self_attn"), dim));
        s.extend(QueryFfn::<T>::specs(&join(prefix, "query_ffn"), dim, ffn_hidden));
        s.extend(CrossAttention::<T>::specs(&join(prefix, "reverse_attn"), dim));
        s.extend(ResBlock::<T>::specs(&join(prefix, "pixel_ffn"), dim, dim, true));
        s
    }

    pub fn load(reg: &ParamRegistry, prefix: &str, n_heads: usize, n_queries: usize) -> Result<Self> {
        Ok(Self {
            aux_mask: AuxMaskHead::load(reg, &join(prefix, "aux_mask"))?,
            cross_attn: CrossAttention::load(reg, &join(prefix, "cross_attn"), n_heads)?,
            self_attn: QuerySelfAttention::load(reg, &join(prefix, "self_attn"), n_heads)?,
            query_ffn: QueryFfn::load(reg, &join(prefix, "query_ffn"))?,
            reverse_attn: CrossAttention::load(reg, &join(prefix, "reverse_attn"), n_heads)?,
            pixel_ffn: ResBlock::load(reg, &join(prefix, "pixel_ffn"), true)?,
            n_queries,
        })
    }

    /// `grid` is the `(H, W)` layout of the `HW` pixel tokens.
    pub fn forward(
        &self,
        queries: &Tensor<T>,
        pixels: &Tensor<T>,
        query_pe: &Tensor<T>,
        pixel_pe: &Tensor<T>,
        grid: (usize, usize),
    ) -> Result<BlockOutput<T>> {
        let aux_mask = self.aux_mask.predict(pixels)?;
        let mask = build_attention_mask(&aux_mask, self.n_queries)?;

        let read = self.cross_attn.forward(queries, pixels, query_pe, pixel_pe, Some(&mask))?;
        let x = self.self_attn.forward(&read.output, query_pe)?;
        let x = self.query_ffn.forward(&x)?;

        let r = self.reverse_attn.forward(pixels, &x, pixel_pe, query_pe, None)?.output;
        let r = self.pixel_ffn.forward(&tokens_to_chw(&r, grid.0, grid.1)?)?;
        Ok(BlockOutput {
            queries: x,
            pixels: chw_to_tokens(&r)?,
            aux_mask,
            attention: read.attention.weights,
        })
    }
}
