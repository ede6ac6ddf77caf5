use super::{join, Conv2d, ParamRegistry, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, sigmoid, Element, Tensor};

/// Convolutional GRU over `C×H×W` hidden maps. All three gates are 3×3
/// same-padded convolutions over the channel concatenation `[h; x]`.
#[derive(Debug, Clone)]
pub struct ConvGru<T: Element = f32> {
    pub update_gate: Conv2d<T>,
    pub reset_gate: Conv2d<T>,
    pub candidate: Conv2d<T>,
}

impl<T: Element> ConvGru<T> {
    pub const KERNEL: usize = 3;

    pub fn specs(prefix: &str, hidden: usize, input: usize) -> Vec<ParamSpec> {
        ["update_gate", "reset_gate", "candidate"]
            .iter()
            .flat_map(|g| Conv2d::<T>::specs(&join(prefix, g), hidden + input, hidden, Self::KERNEL))
            .collect()
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Ok(Self {
            update_gate: Conv2d::load(reg, &join(prefix, "update_gate"), 1)?,
            reset_gate: Conv2d::load(reg, &join(prefix, "reset_gate"), 1)?,
            candidate: Conv2d::load(reg, &join(prefix, "candidate"), 1)?,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.candidate.out_channels()
    }

    /// `h' = (1 − z)∘h + z∘ĥ` with `z = σ(conv_z[h;x])`, `r = σ(conv_r[h;x])`,
    /// `ĥ = tanh(conv_h[r∘h; x])`.
    pub fn forward(&self, h: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (hc, hh, hw) = h.dims3()?;
        let (_, xh, xw) = x.dims3()?;
        if (hh, hw) != (xh, xw) || hc != self.hidden_channels() {
            return Err(Error::dim(format!(
                "GRU with {} hidden channels got h {:?} and x {:?}",
                self.hidden_channels(),
                h.shape(),
                x.shape()
            )));
        }
        let hx = concat_channels(&[h, x])?;
        let z = self.update_gate.forward(&hx)?;
        let r = self.reset_gate.forward(&hx)?;
        let gated = h.zip_with(&r, |hv, rv| T::from_f64(hv.to_f64() * sigmoid(rv.to_f64())))?;
        let cand = self.candidate.forward(&concat_channels(&[&gated, x])?)?;
        let mut out = h.clone();
        for ((o, zv), cv) in out.data_mut().iter_mut().zip(z.data()).zip(cand.data()) {
            let zs = sigmoid(zv.to_f64());
            let hv = o.to_f64();
            *o = T::from_f64((1.0 - zs) * hv + zs * cv.to_f64().tanh());
        }
        Ok(out)
    }
}
