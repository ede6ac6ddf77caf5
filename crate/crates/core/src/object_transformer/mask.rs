use crate::error::{Error, Result};
use crate::nn::{Linear, ParamRegistry, ParamSpec};
use crate::tensor::{sigmoid, Element, Tensor};

/// Additive `N×HW` mask separating foreground and background queries.
///
/// Rows `0..N/2` (foreground queries) allow exactly the pixels with
/// `aux_mask ≥ 0.5`; rows `N/2..N` allow the rest. Blocked entries are `-inf`.
pub fn build_attention_mask<T: Element>(aux_mask: &Tensor<T>, n_queries: usize) -> Result<Tensor<T>> {
    if n_queries == 0 || !n_queries.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "attention mask needs an even, positive query count, got {n_queries}"
        )));
    }
    if aux_mask.rank() != 1 {
        return Err(Error::dim(format!(
            "aux mask must be a flat HW vector, got {:?}",
            aux_mask.shape()
        )));
    }
    let hw = aux_mask.len();
    let fg: Vec<bool> = aux_mask.data().iter().map(|m| m.to_f64() >= 0.5).collect();
    let half = n_queries / 2;
    let mut out = Tensor::zeros([n_queries, hw]);
    for q in 0..n_queries {
        let foreground_query = q < half;
        for (o, &is_fg) in out.row_mut(q).iter_mut().zip(&fg) {
            if is_fg != foreground_query {
                *o = T::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// Per-block auxiliary mask: a linear projection of the pixel features to one
/// logit per pixel, squashed by a sigmoid.
#[derive(Debug, Clone)]
pub struct AuxMaskHead<T: Element = f32> {
    pub proj: Linear<T>,
}

impl<T: Element> AuxMaskHead<T> {
    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        Linear::<T>::specs(prefix, dim, 1)
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Ok(Self {
            proj: Linear::load(reg, prefix)?,
        })
    }

    pub fn logits(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        let (hw, _) = pixels.dims2()?;
        self.proj.forward(pixels)?.reshape([hw])
    }

    /// `M(i) = σ(w·R(i) + b)` for `pixels[HW×C]`.
    pub fn predict(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.logits(pixels)?.map_f64(sigmoid))
    }
}
