//! Object memory: `N` vectors summarizing a target, pooled from object
//! features with foreground/background-separated pooling weights and kept as
//! a running weighted average.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Mlp, ParamRegistry, ParamSpec};
use crate::tensor::{sigmoid, Element, Tensor};

/// Rows whose accumulated weight is at or below this read as zero.
pub const READ_EPS: f64 = 1e-8;

/// Running sums `σ_S = Σ W·U` and `σ_W = Σ W`. Size is fixed by `N` and `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMemory {
    sigma_s: Tensor<f64>,
    sigma_w: Vec<f64>,
    n_updates: usize,
}

impl ObjectMemory {
    pub fn new(n_queries: usize, dim: usize) -> Self {
        Self {
            sigma_s: Tensor::zeros([n_queries, dim]),
            sigma_w: vec![0.0; n_queries],
            n_updates: 0,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.sigma_w.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma_s.dim(1)
    }

    pub fn n_updates(&self) -> usize {
        self.n_updates
    }

    pub fn sigma_s(&self) -> &Tensor<f64> {
        &self.sigma_s
    }

    pub fn sigma_w(&self) -> &[f64] {
        &self.sigma_w
    }

    /// Adds one frame: `σ_S += W·U`, `σ_W += rowsum(W)`. Rows of `W` that are
    /// entirely zero leave the corresponding state untouched.
    pub fn update<T: Element>(&mut self, features: &Tensor<T>, weights: &Tensor<T>) -> Result<()> {
        let (hw, c) = features.dims2()?;
        let (n, whw) = weights.dims2()?;
        if n != self.n_queries() || c != self.dim() || whw != hw {
            return Err(Error::dim(format!(
                "object memory {}×{} updated with U {:?} and W {:?}",
                self.n_queries(),
                self.dim(),
                features.shape(),
                weights.shape()
            )));
        }
        for q in 0..n {
            let w = weights.row(q);
            if w.iter().all(|&v| v == T::ZERO) {
                continue;
            }
            let mut acc = vec![0.0f64; c];
            let mut total = 0.0;
            for (i, &wv) in w.iter().enumerate() {
                let wv = wv.to_f64();
                if wv == 0.0 {
                    continue;
                }
                total += wv;
                for (a, &u) in acc.iter_mut().zip(features.row(i)) {
                    *a += wv * u.to_f64();
                }
            }
            for (s, a) in self.sigma_s.row_mut(q).iter_mut().zip(acc) {
                *s += a;
            }
            self.sigma_w[q] += total;
        }
        self.n_updates += 1;
        Ok(())
    }

    /// `S_q = σ_S[q] / σ_W[q]`, or zeros when `σ_W[q] ≤ READ_EPS`.
    pub fn read<T: Element>(&self) -> Tensor<T> {
        let (n, c) = (self.n_queries(), self.dim());
        let mut out = Tensor::zeros([n, c]);
        for q in 0..n {
            let w = self.sigma_w[q];
            if w > READ_EPS {
                for (o, s) in out.row_mut(q).iter_mut().zip(self.sigma_s.row(q)) {
                    *o = T::from_f64(s / w);
                }
            }
        }
        out
    }
}

/// The learned parts: object feature MLP and pooling-weight MLP.
#[derive(Debug, Clone)]
pub struct ObjectMemoryEncoder<T: Element = f32> {
    /// `C → C → C`, applied per pixel.
    pub feature: Mlp<T>,
    /// `C → N → N`, one pooling logit per query per pixel.
    pub pool_weight: Mlp<T>,
}

impl<T: Element> ObjectMemoryEncoder<T> {
    pub const PREFIX: &'static str = "object_memory";

    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let (c, n) = (cfg.dim, cfg.n_queries);
        let mut s = Mlp::<T>::specs(&join(Self::PREFIX, "feature"), c, c, c);
        s.extend(Mlp::<T>::specs(&join(Self::PREFIX, "pool_weight"), c, n, n));
        s
    }

    pub fn load(reg: &ParamRegistry) -> Result<Self> {
        Ok(Self {
            feature: Mlp::load(reg, &join(Self::PREFIX, "feature"))?,
            pool_weight: Mlp::load(reg, &join(Self::PREFIX, "pool_weight"))?,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.pool_weight.fc2.out_dim()
    }

    /// `U = f(F)` for `F[HW×C]`.
    pub fn object_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.feature.forward(features)
    }

    /// `W[N×HW]`: zero where a foreground query meets a background pixel or
    /// vice versa (`mask < 0.5` is background), else the sigmoid of the
    /// pooling MLP applied to `F + R_sin`.
    pub fn pooling_weights(&self, features: &Tensor<T>, mask: &Tensor<T>, r_sin: &Tensor<T>) -> Result<Tensor<T>> {
        let (hw, _) = features.dims2()?;
        if mask.len() != hw {
            return Err(Error::dim(format!(
                "pooling mask with {} entries for {hw} pixels",
                mask.len()
            )));
        }
        let logits = self.pool_weight.forward(&features.add(r_sin)?)?;
        let n = logits.dim(1);
        let half = n / 2;
        let mut out = Tensor::zeros([n, hw]);
        for i in 0..hw {
            let fg = mask.data()[i].to_f64() >= 0.5;
            for q in 0..n {
                if (q < half) == fg {
                    out.set(&[q, i], T::from_f64(sigmoid(logits.at(&[i, q]).to_f64())));
                }
            }
        }
        Ok(out)
    }
}
