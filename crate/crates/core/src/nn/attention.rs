use super::{join, Linear, ParamRegistry, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{masked_softmax_rows, matmul, matmul_transposed, softmax_rows, Element, Tensor};

/// Multi-head scaled dot-product attention with learned input and output
/// projections. No residual; callers add it.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Element = f32> {
    pub q_proj: Linear<T>,
    pub k_proj: Linear<T>,
    pub v_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub n_heads: usize,
}

/// Everything the forward pass computed, kept for inspection and backward passes.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Element = f32> {
    pub output: Tensor<T>,
    /// Projected queries, keys and values (`n×C`).
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Per-head attention weights, each `nq×nk`.
    pub weights: Vec<Tensor<T>>,
    /// Concatenated per-head outputs before the output projection (`nq×C`).
    pub heads: Tensor<T>,
}

impl<T: Element> AttentionOutput<T> {
    /// Attention weights averaged over heads.
    pub fn mean_weights(&self) -> Tensor<T> {
        let n = self.weights.len() as f64;
        let mut acc = self.weights[0].cast::<f64>();
        for w in &self.weights[1..] {
            acc.add_assign(&w.cast()).expect("heads share a shape");
        }
        acc.map(|v| v / n).cast()
    }
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        ["q_proj", "k_proj", "v_proj", "out_proj"]
            .iter()
            .flat_map(|p| Linear::<T>::specs(&join(prefix, p), dim, dim))
            .collect()
    }

    pub fn load(reg: &ParamRegistry, prefix: &str, n_heads: usize) -> Result<Self> {
        let mha = Self {
            q_proj: Linear::load(reg, &join(prefix, "q_proj"))?,
            k_proj: Linear::load(reg, &join(prefix, "k_proj"))?,
            v_proj: Linear::load(reg, &join(prefix, "v_proj"))?,
            out_proj: Linear::load(reg, &join(prefix, "out_proj"))?,
            n_heads,
        };
        mha.validate()?;
        Ok(mha)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim();
        if self.n_heads == 0 || !c.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide model width {c}",
                self.n_heads
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.q_proj.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// `query_in[nq×C]` attends over `key_in[nk×C]`/`value_in[nk×C]`. The
    /// additive `mask[nq×nk]` (entries 0 or -inf) is shared by every head.
    pub fn forward(
        &self,
        query_in: &Tensor<T>,
        key_in: &Tensor<T>,
        value_in: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<AttentionOutput<T>> {
        self.validate()?;
        let (nq, _) = query_in.dims2()?;
        let (nk, _) = key_in.dims2()?;
        if value_in.dims2()?.0 != nk {
            return Err(Error::dim(format!(
                "{nk} keys but {} values",
                value_in.dims2()?.0
            )));
        }
        if let Some(m) = mask {
            if m.shape() != [nq, nk] {
                return Err(Error::dim(format!(
                    "attention mask {:?} for {nq} queries × {nk} keys",
                    m.shape()
                )));
            }
        }
        let q = self.q_proj.forward(query_in)?;
        let k = self.k_proj.forward(key_in)?;
        let v = self.v_proj.forward(value_in)?;

        let d = self.head_dim();
        let scale = T::from_f64(self.scale());
        let mut weights = Vec::with_capacity(self.n_heads);
        let mut head_outputs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * d, (h + 1) * d)?;
            let kh = k.slice_cols(h * d, (h + 1) * d)?;
            let vh = v.slice_cols(h * d, (h + 1) * d)?;
            let logits = matmul_transposed(&qh, &kh)?.scale(scale);
            let a = match mask {
                Some(m) => masked_softmax_rows(&logits, m)?,
                None => softmax_rows(&logits)?,
            };
            head_outputs.push(matmul(&a, &vh)?);
            weights.push(a);
        }
        let heads = Tensor::hstack(&head_outputs.iter().collect::<Vec<_>>())?;
        let output = self.out_proj.forward(&heads)?;
        Ok(AttentionOutput {
            output,
            q,
            k,
            v,
            weights,
            heads,
        })
    }
}
