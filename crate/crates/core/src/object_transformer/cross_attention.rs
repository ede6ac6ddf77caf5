use crate::error::{Error, Result};
use crate::nn::{join, AttentionOutput, LayerNorm, MultiHeadAttention, ParamRegistry, ParamSpec};
use crate::tensor::{matmul, matmul_transposed, transposed_matmul, Element, Tensor};

/// Pre-norm residual cross-attention:
/// `x + MHA(LN(x) + x_pe, mem + mem_pe, mem, mask)`.
///
/// Positional embeddings go to queries and keys only. Used in both
/// directions: object queries reading pixels (masked) and pixels reading
/// object queries (unmasked).
#[derive(Debug, Clone)]
pub struct CrossAttention<T: Element = f32> {
    pub norm: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionPass<T: Element = f32> {
    pub output: Tensor<T>,
    pub attention: AttentionOutput<T>,
}

/// Forward state needed by [`CrossAttention::backward`].
#[derive(Debug, Clone)]
pub struct CrossAttentionCache<T: Element = f32> {
    layer: CrossAttention<T>,
    x: Tensor<T>,
    mem: Tensor<T>,
    query_in: Tensor<T>,
    key_in: Tensor<T>,
    attention: AttentionOutput<T>,
}

/// Gradients of `Σ upstream ∘ output` with respect to every input and parameter.
#[derive(Debug, Clone)]
pub struct CrossAttentionGrads<T: Element = f32> {
    pub x: Tensor<T>,
    pub mem: Tensor<T>,
    pub x_pe: Tensor<T>,
    pub mem_pe: Tensor<T>,
    pub norm_weight: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

pub const PARAM_NAMES: [&str; 10] = [
    "norm.weight",
    "norm.bias",
    "q_proj.weight",
    "q_proj.bias",
    "k_proj.weight",
    "k_proj.bias",
    "v_proj.weight",
    "v_proj.bias",
    "out_proj.weight",
    "out_proj.bias",
];

impl<T: Element> CrossAttentionGrads<T> {
    /// Input gradients (`x`, `mem`, `x_pe`, `mem_pe`) followed by parameter
    /// gradients named as in [`CrossAttention::params`].
    pub fn groups(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("x", &self.x),
            ("mem", &self.mem),
            ("x_pe", &self.x_pe),
            ("mem_pe", &self.mem_pe),
            (PARAM_NAMES[0], &self.norm_weight),
            (PARAM_NAMES[1], &self.norm_bias),
            (PARAM_NAMES[2], &self.q_weight),
            (PARAM_NAMES[3], &self.q_bias),
            (PARAM_NAMES[4], &self.k_weight),
            (PARAM_NAMES[5], &self.k_bias),
            (PARAM_NAMES[6], &self.v_weight),
            (PARAM_NAMES[7], &self.v_bias),
            (PARAM_NAMES[8], &self.out_weight),
            (PARAM_NAMES[9], &self.out_bias),
        ]
    }
}

impl<T: Element> CrossAttention<T> {
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

    pub fn params(&self) -> [(&'static str, &Tensor<T>); 10] {
        let a = &self.attn;
        let t = [
            &self.norm.weight,
            &self.norm.bias,
            &a.q_proj.weight,
            &a.q_proj.bias,
            &a.k_proj.weight,
            &a.k_proj.bias,
            &a.v_proj.weight,
            &a.v_proj.bias,
            &a.out_proj.weight,
            &a.out_proj.bias,
        ];
        std::array::from_fn(|i| (PARAM_NAMES[i], t[i]))
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 10] {
        let a = &mut self.attn;
        let mut t = [
            Some(&mut self.norm.weight),
            Some(&mut self.norm.bias),
            Some(&mut a.q_proj.weight),
            Some(&mut a.q_proj.bias),
            Some(&mut a.k_proj.weight),
            Some(&mut a.k_proj.bias),
            Some(&mut a.v_proj.weight),
            Some(&mut a.v_proj.bias),
            Some(&mut a.out_proj.weight),
            Some(&mut a.out_proj.bias),
        ];
        std::array::from_fn(|i| (PARAM_NAMES[i], t[i].take().expect("each slot taken once")))
    }

    fn inputs(
        &self,
        x: &Tensor<T>,
        mem: &Tensor<T>,
        x_pe: &Tensor<T>,
        mem_pe: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        x.expect_same_shape(x_pe)?;
        mem.expect_same_shape(mem_pe)?;
        let query_in = self.norm.forward(x)?.add(x_pe)?;
        let key_in = mem.add(mem_pe)?;
        Ok((query_in, key_in))
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mem: &Tensor<T>,
        x_pe: &Tensor<T>,
        mem_pe: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<CrossAttentionPass<T>> {
        let (query_in, key_in) = self.inputs(x, mem, x_pe, mem_pe)?;
        let attention = self.attn.forward(&query_in, &key_in, mem, mask)?;
        Ok(CrossAttentionPass {
            output: x.add(&attention.output)?,
            attention,
        })
    }

    /// Like [`forward`](Self::forward), additionally returning the state for a
    /// backward pass.
    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        mem: &Tensor<T>,
        x_pe: &Tensor<T>,
        mem_pe: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, CrossAttentionCache<T>)> {
        let (query_in, key_in) = self.inputs(x, mem, x_pe, mem_pe)?;
        let attention = self.attn.forward(&query_in, &key_in, mem, mask)?;
        let output = x.add(&attention.output)?;
        let cache = CrossAttentionCache {
            layer: self.clone(),
            x: x.clone(),
            mem: mem.clone(),
            query_in,
            key_in,
            attention,
        };
        Ok((output, cache))
    }

    /// Analytic gradients of `Σ upstream ∘ forward(...)`.
    ///
    /// The mask is a constant of the forward pass: blocked entries carry zero
    /// attention and therefore zero gradient. Fails with a state error when
    /// the layer's parameters changed since `cache` was recorded.
    pub fn backward(&self, cache: &CrossAttentionCache<T>, upstream: &Tensor<T>) -> Result<CrossAttentionGrads<T>> {
        let stale = self
            .params()
            .iter()
            .zip(cache.layer.params().iter())
            .any(|((_, a), (_, b))| a != b);
        if stale {
            return Err(Error::State(
                "cross-attention parameters changed since the cached forward pass".into(),
            ));
        }
        upstream.expect_same_shape(&cache.x)?;
        let attn = &self.attn;
        let fwd = &cache.attention;
        let d = attn.head_dim();
        let scale = T::from_f64(attn.scale());

        let out_weight = transposed_matmul(upstream, &fwd.heads)?;
        let out_bias = upstream.sum_rows()?;
        let d_heads = matmul(upstream, &attn.out_proj.weight)?;

        let mut dq_parts = Vec::with_capacity(attn.n_heads);
        let mut dk_parts = Vec::with_capacity(attn.n_heads);
        let mut dv_parts = Vec::with_capacity(attn.n_heads);
        for (h, a) in fwd.weights.iter().enumerate() {
            let cols = (h * d, (h + 1) * d);
            let qh = fwd.q.slice_cols(cols.0, cols.1)?;
            let kh = fwd.k.slice_cols(cols.0, cols.1)?;
            let vh = fwd.v.slice_cols(cols.0, cols.1)?;
            let dh = d_heads.slice_cols(cols.0, cols.1)?;

            let da = matmul_transposed(&dh, &vh)?;
            dv_parts.push(transposed_matmul(a, &dh)?);
            let ds = softmax_backward(a, &da)?;
            dq_parts.push(matmul(&ds, &kh)?.scale(scale));
            dk_parts.push(transposed_matmul(&ds, &qh)?.scale(scale));
        }
        let stack = |parts: &[Tensor<T>]| Tensor::hstack(&parts.iter().collect::<Vec<_>>());
        let dq = stack(&dq_parts)?;
        let dk = stack(&dk_parts)?;
        let dv = stack(&dv_parts)?;

        let q_weight = transposed_matmul(&dq, &cache.query_in)?;
        let k_weight = transposed_matmul(&dk, &cache.key_in)?;
        let v_weight = transposed_matmul(&dv, &cache.mem)?;
        let d_query_in = matmul(&dq, &attn.q_proj.weight)?;
        let d_key_in = matmul(&dk, &attn.k_proj.weight)?;
        let d_mem = d_key_in.add(&matmul(&dv, &attn.v_proj.weight)?)?;

        let (dx_norm, norm_weight, norm_bias) = layer_norm_backward(&self.norm, &cache.x, &d_query_in)?;
        Ok(CrossAttentionGrads {
            x: upstream.add(&dx_norm)?,
            mem: d_mem,
            x_pe: d_query_in.clone(),
            mem_pe: d_key_in,
            norm_weight,
            norm_bias,
            q_bias: dq.sum_rows()?,
            q_weight,
            k_bias: dk.sum_rows()?,
            k_weight,
            v_bias: dv.sum_rows()?,
            v_weight,
            out_weight,
            out_bias,
        })
    }
}

/// Row-wise softmax Jacobian-vector product: `A ∘ (dA − rowsum(dA ∘ A))`.
/// Entries with zero probability (masked, or fully-masked rows) get zero.
fn softmax_backward<T: Element>(a: &Tensor<T>, da: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    da.expect_same_shape(a)?;
    let mut out = Tensor::zeros([r, c]);
    for i in 0..r {
        let (ar, dr) = (a.row(i), da.row(i));
        let dot: f64 = ar.iter().zip(dr).map(|(p, g)| p.to_f64() * g.to_f64()).sum();
        for ((o, p), g) in out.row_mut(i).iter_mut().zip(ar).zip(dr) {
            *o = T::from_f64(p.to_f64() * (g.to_f64() - dot));
        }
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)` for `y = LN(x)` given `dy`.
fn layer_norm_backward<T: Element>(
    norm: &LayerNorm<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c) = x.dims2()?;
    dy.expect_same_shape(x)?;
    let mut dx = Tensor::zeros([n, c]);
    let mut dw = vec![0.0f64; c];
    let mut db = vec![0.0f64; c];
    let gamma: Vec<f64> = norm.weight.data().iter().map(|v| v.to_f64()).collect();
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().map(|v| v.to_f64()).collect();
        let g: Vec<f64> = dy.row(i).iter().map(|v| v.to_f64()).collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + norm.eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
        let dxhat: Vec<f64> = g.iter().zip(&gamma).map(|(a, b)| a * b).collect();
        for j in 0..c {
            dw[j] += g[j] * xhat[j];
            db[j] += g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = T::from_f64(rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx));
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new([c], v.into_iter().map(T::from_f64).collect());
    Ok((dx, to_t(dw)?, to_t(db)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::tensor::softmax_rows;
    use crate::testing::{central_difference_check, uniform, Rng};

    pub(crate) fn layer(dim: usize, heads: usize, seed: u64) -> CrossAttention<f64> {
        let mut specs = CrossAttention::<f32>::specs("ca", dim);
        for s in specs.iter_mut() {
            s.init = Init::TruncNormal { std: 0.4 };
        }
        let reg = ParamRegistry::initialize(&specs, seed).unwrap();
        CrossAttention::load(&reg, "ca", heads).unwrap()
    }

    struct Case {
        x: Tensor<f64>,
        mem: Tensor<f64>,
        x_pe: Tensor<f64>,
        mem_pe: Tensor<f64>,
        mask: Tensor<f64>,
    }

    fn case(n: usize, hw: usize, c: usize, rng: &mut Rng) -> Case {
        // Random hard mask; query counts need not be even here.
        let mask = Tensor::from_fn([n, hw], |_| if rng.uniform(0.0, 1.0) < 0.4 { f64::NEG_INFINITY } else { 0.0 });
        Case {
            x: uniform(rng, [n, c], -1.0, 1.0),
            mem: uniform(rng, [hw, c], -1.0, 1.0),
            x_pe: uniform(rng, [n, c], -0.5, 0.5),
            mem_pe: uniform(rng, [hw, c], -0.5, 0.5),
            mask,
        }
    }

    #[test]
    fn single_allowed_pixel_copies_its_value() {
        let ca = layer(8, 2, 1);
        let mut rng = Rng::seeded(1);
        let c = case(2, 5, 8, &mut rng);
        let mut mask = Tensor::full([2, 5], f64::NEG_INFINITY);
        mask.set(&[0, 3], 0.0);
        mask.set(&[1, 1], 0.0);
        let out = ca.forward(&c.x, &c.mem, &c.x_pe, &c.mem_pe, Some(&mask)).unwrap().output;
        let v = ca.attn.v_proj.forward(&c.mem).unwrap();
        let projected = ca.attn.out_proj.forward(&v).unwrap();
        for (q, j) in [(0, 3), (1, 1)] {
            for ch in 0..8 {
                let expected = projected.at(&[j, ch]) + c.x.at(&[q, ch]);
                assert!((out.at(&[q, ch]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_residual_only() {
        let mut ca = layer(8, 2, 2);
        ca.attn.out_proj.bias = Tensor::zeros([8]);
        let mut rng = Rng::seeded(2);
        let c = case(4, 6, 8, &mut rng);
        let mut mask = c.mask.clone();
        mask.row_mut(1).iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        let out = ca.forward(&c.x, &c.mem, &c.x_pe, &c.mem_pe, Some(&mask)).unwrap().output;
        assert_eq!(out.row(1), c.x.row(1));
    }

    /// Explicit per-head loops with `-inf` filled logits.
    fn dense_oracle(ca: &CrossAttention<f64>, c: &Case) -> Tensor<f64> {
        let xn = ca.norm.forward(&c.x).unwrap();
        let q = ca.attn.q_proj.forward(&xn.add(&c.x_pe).unwrap()).unwrap();
        let k = ca.attn.k_proj.forward(&c.mem.add(&c.mem_pe).unwrap()).unwrap();
        let v = ca.attn.v_proj.forward(&c.mem).unwrap();
        let (n, dim) = q.dims2().unwrap();
        let hw = k.dim(0);
        let d = ca.attn.head_dim();
        let mut heads = Tensor::<f64>::zeros([n, dim]);
        for h in 0..ca.attn.n_heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..hw)
                    .map(|j| {
                        if c.mask.at(&[i, j]) == f64::NEG_INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            (0..d).map(|t| q.at(&[i, h * d + t]) * k.at(&[j, h * d + t])).sum::<f64>()
                                / (d as f64).sqrt()
                        }
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..d {
                    let s: f64 = (0..hw).map(|j| e[j] / z * v.at(&[j, h * d + t])).sum();
                    heads.set(&[i, h * d + t], s);
                }
            }
        }
        ca.attn.out_proj.forward(&heads).unwrap().add(&c.x).unwrap()
    }

    #[test]
    fn matches_dense_oracle() {
        let ca = layer(16, 4, 3);
        let mut rng = Rng::seeded(3);
        let c = case(4, 12, 16, &mut rng);
        let out = ca.forward(&c.x, &c.mem, &c.x_pe, &c.mem_pe, Some(&c.mask)).unwrap().output;
        assert!(out.max_abs_diff(&dense_oracle(&ca, &c)) < 1e-5);
    }

    #[test]
    fn unmasked_matches_plain_softmax() {
        let ca = layer(8, 1, 4);
        let mut rng = Rng::seeded(4);
        let c = case(3, 5, 8, &mut rng);
        let pass = ca.forward(&c.x, &c.mem, &c.x_pe, &c.mem_pe, None).unwrap();
        let logits = matmul_transposed(&pass.attention.q, &pass.attention.k).unwrap().scale(1.0 / 8f64.sqrt());
        assert!(pass.attention.weights[0].max_abs_diff(&softmax_rows(&logits).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let ca = layer(8, 2, 5);
        let mut rng = Rng::seeded(5);
        let c = case(4, 6, 8, &mut rng);
        let (_, cache) = ca.forward_cached(&c.x, &c.mem, &c.x_pe, &c.mem_pe, Some(&c.mask)).unwrap();
        let g = ca.backward(&cache, &Tensor::zeros([4, 8])).unwrap();
        for (name, t) in g.groups() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn fully_masked_row_passes_upstream_through() {
        let ca = layer(8, 2, 6);
        let mut rng = Rng::seeded(6);
        let c = case(4, 6, 8, &mut rng);
        let mut mask = c.mask.clone();
        mask.row_mut(2).iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        let (_, cache) = ca.forward_cached(&c.x, &c.mem, &c.x_pe, &c.mem_pe, Some(&mask)).unwrap();
        let mut upstream = Tensor::zeros([4, 8]);
        upstream.row_mut(2).copy_from_slice(&[1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0, 2.0]);
        let g = ca.backward(&cache, &upstream).unwrap();
        assert_eq!(g.x.row(2), upstream.row(2));
        assert!(g.mem.data().iter().all(|&v| v == 0.0));
        assert!(g.mem_pe.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let ca = layer(8, 2, seed);
            let mut rng = Rng::seeded(100 + seed);
            let c = case(3, 8, 8, &mut rng);
            let upstream = uniform::<f64>(&mut rng, [3, 8], -1.0, 1.0);
            let report = central_difference_check(&ca, &c.x, &c.mem, &c.x_pe, &c.mem_pe, Some(&c.mask), &upstream)
                .unwrap();
            for (name, err) in report {
                assert!(err < 1e-4, "seed {seed} {name}: {err:e}");
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut ca = layer(8, 2, 7);
        let mut rng = Rng::seeded(7);
        let c = case(2, 4, 8, &mut rng);
        let (_, cache) = ca.forward_cached(&c.x, &c.mem, &c.x_pe, &c.mem_pe, None).unwrap();
        ca.attn.k_proj.bias.data_mut()[0] += 1.0;
        assert!(matches!(ca.backward(&cache, &Tensor::zeros([2, 8])), Err(Error::State(_))));
    }
}
