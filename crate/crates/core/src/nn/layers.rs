use super::{join, Init, ParamRegistry, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, matmul_transposed, sigmoid, Conv2dSpec, Element, Tensor};

fn load<T: Element>(reg: &ParamRegistry, prefix: &str, name: &str) -> Result<Tensor<T>> {
    Ok(reg.get(&join(prefix, name))?.cast())
}

#[derive(Debug, Clone)]
pub struct Linear<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (dout, _) = weight.dims2()?;
        if bias.shape() != [dout] {
            return Err(Error::dim(format!(
                "linear bias {:?} for weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn specs(prefix: &str, din: usize, dout: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "weight"), [dout, din], Init::TruncNormal { std: 0.02 }),
            ParamSpec::new(join(prefix, "bias"), [dout], Init::Zeros),
        ]
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Self::new(load(reg, prefix, "weight")?, load(reg, prefix, "bias")?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    /// `x[n×din] · Wᵀ + b`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_transposed(x, &self.weight)?.add_row_vector(&self.bias)
    }
}

/// Normalization over the channel (last) axis of `n×C` tokens.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "weight"), [dim], Init::Ones),
            ParamSpec::new(join(prefix, "bias"), [dim], Init::Zeros),
        ]
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: load(reg, prefix, "weight")?,
            bias: load(reg, prefix, "bias")?,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = x.dims2()?;
        if self.weight.len() != c {
            return Err(Error::dim(format!(
                "layer norm over {} channels applied to {c}",
                self.weight.len()
            )));
        }
        let mut out = Tensor::zeros([n, c]);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| (v.to_f64() - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let rstd = 1.0 / (var + self.eps).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let xhat = (row[j].to_f64() - mean) * rstd;
                *o = T::from_f64(xhat * self.weight.data()[j].to_f64() + self.bias.data()[j].to_f64());
            }
        }
        Ok(out)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp<T: Element = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> Mlp<T> {
    pub fn specs(prefix: &str, din: usize, hidden: usize, dout: usize) -> Vec<ParamSpec> {
        let mut s = Linear::<T>::specs(&join(prefix, "fc1"), din, hidden);
        s.extend(Linear::<T>::specs(&join(prefix, "fc2"), hidden, dout));
        s
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        Ok(Self {
            fc1: Linear::load(reg, &join(prefix, "fc1"))?,
            fc2: Linear::load(reg, &join(prefix, "fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: Conv2dSpec,
}

impl<T: Element> Conv2d<T> {
    pub fn specs(prefix: &str, cin: usize, cout: usize, kernel: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "weight"), [cout, cin, kernel, kernel], Init::He),
            ParamSpec::new(join(prefix, "bias"), [cout], Init::Zeros),
        ]
    }

    pub fn load(reg: &ParamRegistry, prefix: &str, stride: usize) -> Result<Self> {
        let weight: Tensor<T> = load(reg, prefix, "weight")?;
        if weight.rank() != 4 || weight.dim(2).is_multiple_of(2) || weight.dim(3).is_multiple_of(2) {
            return Err(Error::dim(format!(
                "`{prefix}` needs an odd-sized rank-4 kernel, got {:?}",
                weight.shape()
            )));
        }
        let pad = weight.dim(2) / 2;
        Ok(Self {
            weight,
            bias: load(reg, prefix, "bias")?,
            spec: Conv2dSpec { stride, pad },
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), self.spec)
    }
}

/// Efficient channel attention: each channel is rescaled by the sigmoid of a
/// 1D convolution over the per-channel spatial means.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ChannelAttention<T> {
    pub const KERNEL: usize = 3;

    pub fn specs(prefix: &str) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "weight"), [Self::KERNEL], Init::He),
            ParamSpec::new(join(prefix, "bias"), [1], Init::Zeros),
        ]
    }

    pub fn load(reg: &ParamRegistry, prefix: &str) -> Result<Self> {
        let weight: Tensor<T> = load(reg, prefix, "weight")?;
        if weight.rank() != 1 || weight.len().is_multiple_of(2) {
            return Err(Error::dim(format!(
                "`{prefix}` needs an odd 1D kernel, got {:?}",
                weight.shape()
            )));
        }
        Ok(Self {
            weight,
            bias: load(reg, prefix, "bias")?,
        })
    }

    /// Per-channel gates in (0, 1).
    pub fn gates(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let (c, h, w) = x.dims3()?;
        let hw = (h * w) as f64;
        let desc: Vec<f64> = x
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().map(|v| v.to_f64()).sum::<f64>() / hw)
            .collect();
        let k = self.weight.len();
        let half = (k / 2) as isize;
        let b = self.bias.data()[0].to_f64();
        Ok((0..c as isize)
            .map(|ci| {
                let mut s = b;
                for (t, wt) in self.weight.data().iter().enumerate() {
                    let src = ci + t as isize - half;
                    if src >= 0 && src < c as isize {
                        s += wt.to_f64() * desc[src as usize];
                    }
                }
                sigmoid(s)
            })
            .collect())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = x.dims3()?;
        let gates = self.gates(x)?;
        let mut out = x.clone();
        for (plane, g) in out.data_mut().chunks_mut(h * w).zip(gates) {
            plane
                .iter_mut()
                .for_each(|v| *v = T::from_f64(v.to_f64() * g));
        }
        Ok(out)
    }
}

/// Pre-activation residual block: `skip(x) + [eca](conv2(relu(conv1(relu(x)))))`.
/// The skip is a 1×1 projection when the channel count changes, else identity.
#[derive(Debug, Clone)]
pub struct ResBlock<T: Element = f32> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
    pub attention: Option<ChannelAttention<T>>,
}

impl<T: Element> ResBlock<T> {
    pub fn specs(prefix: &str, cin: usize, cout: usize, channel_attention: bool) -> Vec<ParamSpec> {
        let mut s = Conv2d::<T>::specs(&join(prefix, "conv1"), cin, cout, 3);
        s.extend(Conv2d::<T>::specs(&join(prefix, "conv2"), cout, cout, 3));
        if cin != cout {
            s.extend(Conv2d::<T>::specs(&join(prefix, "skip"), cin, cout, 1));
        }
        if channel_attention {
            s.extend(ChannelAttention::<T>::specs(&join(prefix, "eca")));
        }
        s
    }

    pub fn load(reg: &ParamRegistry, prefix: &str, channel_attention: bool) -> Result<Self> {
        let conv1 = Conv2d::load(reg, &join(prefix, "conv1"), 1)?;
        let conv2 = Conv2d::load(reg, &join(prefix, "conv2"), 1)?;
        let skip_name = join(prefix, "skip");
        let skip = if reg.contains(&join(&skip_name, "weight")) {
            Some(Conv2d::load(reg, &skip_name, 1)?)
        } else {
            None
        };
        let attention = if channel_attention {
            Some(ChannelAttention::load(reg, &join(prefix, "eca"))?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            skip,
            attention,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut r = self.conv2.forward(&self.conv1.forward(&x.relu())?.relu())?;
        if let Some(eca) = &self.attention {
            r = eca.forward(&r)?;
        }
        match &self.skip {
            Some(skip) => skip.forward(x)?.add(&r),
            None => x.add(&r),
        }
    }
}
