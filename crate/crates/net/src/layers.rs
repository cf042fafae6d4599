//! Convolution, normalization and the up-projection family of blocks.

use candle_core::Tensor;

use crate::kernels::{conv2d, ConvGeometry};
use crate::params::{Buffer, Init, Scope};
use crate::resample::{resize_bilinear, unpool2x};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics; the forward pass is a pure function.
    Eval,
}

pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeometry,
    in_channels: usize,
}

impl Conv {
    pub fn new(
        s: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let weight = s.param("weight", &[out_channels, in_channels, kernel.0, kernel.1], Init::HeFanOut)?;
        let bias = if bias {
            Some(s.param("bias", &[out_channels], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom,
            in_channels,
        })
    }

    /// Padding-preserving stride-1 convolution.
    pub fn same(s: &Scope, in_c: usize, out_c: usize, kernel: (usize, usize), bias: bool) -> Result<Self> {
        Self::new(s, in_c, out_c, kernel, ConvGeometry::same(kernel, 1), bias)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                found: c,
            });
        }
        let y = conv2d(x, &self.weight, self.geom)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Buffer,
    running_var: Buffer,
}

impl BatchNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[channels], Init::Const(1.0))?,
            beta: s.param("beta", &[channels], Init::Const(0.0))?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let m = n * h * w;
                let xc = x.transpose(0, 1)?.contiguous()?.reshape((c, m))?;
                let mean = xc.mean_keepdim(1)?;
                let var = xc.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
                let (mean, var) = (mean.reshape(c)?, var.reshape(c)?);
                let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let mut rm = self.running_mean.lock().unwrap();
                *rm = ((&*rm * (1.0 - BN_MOMENTUM))? + (mean.detach() * BN_MOMENTUM)?)?;
                let mut rv = self.running_var.lock().unwrap();
                *rv = ((&*rv * (1.0 - BN_MOMENTUM))? + (var.detach() * (BN_MOMENTUM * unbiased))?)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.lock().unwrap().clone(),
                self.running_var.lock().unwrap().clone(),
            ),
        };
        let shape = (1, c, 1, 1);
        let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
        let scale = (inv_std * &self.gamma)?.reshape(shape)?;
        Ok(x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Convolution, optional batch normalization, optional ReLU.
pub struct ConvUnit {
    conv: Conv,
    bn: Option<BatchNorm>,
    relu: bool,
}

impl ConvUnit {
    pub fn new(
        s: &Scope,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        norm: bool,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv::new(&s.sub("conv"), in_c, out_c, kernel, geom, !norm)?;
        let bn = if norm {
            Some(BatchNorm::new(&s.sub("bn"), out_c)?)
        } else {
            None
        };
        Ok(Self { conv, bn, relu })
    }

    pub fn same(s: &Scope, in_c: usize, out_c: usize, k: usize, norm: bool, relu: bool) -> Result<Self> {
        Self::new(s, in_c, out_c, (k, k), ConvGeometry::same((k, k), 1), norm, relu)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(&y, mode)?;
        }
        if self.relu {
            y = y.relu()?;
        }
        Ok(y)
    }

    pub fn conv(&self) -> &Conv {
        &self.conv
    }
}

/// Up-projection block: optional nearest 2x unpooling, then
/// `relu(conv3x3(relu(conv5x5(x))) + conv5x5(x))`, then an exact resize to
/// the requested target when the size differs.
///
/// Without unpooling this is the resolution-preserving large-kernel block.
pub struct UpProjection {
    unpool: bool,
    a1: ConvUnit,
    a2: ConvUnit,
    b: ConvUnit,
}

impl UpProjection {
    pub fn new(s: &Scope, in_c: usize, out_c: usize, unpool: bool, norm: bool) -> Result<Self> {
        Ok(Self {
            unpool,
            a1: ConvUnit::same(&s.sub("a1"), in_c, out_c, 5, norm, true)?,
            a2: ConvUnit::same(&s.sub("a2"), out_c, out_c, 3, norm, false)?,
            b: ConvUnit::same(&s.sub("b"), in_c, out_c, 5, norm, false)?,
        })
    }

    /// Resolution-preserving variant.
    pub fn large_kernel(s: &Scope, in_c: usize, out_c: usize) -> Result<Self> {
        Self::new(s, in_c, out_c, false, true)
    }

    pub fn forward(&self, x: &Tensor, target: Option<(usize, usize)>, mode: Mode) -> Result<Tensor> {
        let x = if self.unpool { unpool2x(x)? } else { x.clone() };
        let a = self.a2.forward(&self.a1.forward(&x, mode)?, mode)?;
        let b = self.b.forward(&x, mode)?;
        let y = (a + b)?.relu()?;
        match target {
            Some((h, w)) => resize_bilinear(&y, h, w),
            None => Ok(y),
        }
    }

    pub fn branch_b(&self) -> &ConvUnit {
        &self.b
    }

    pub fn branch_a(&self) -> (&ConvUnit, &ConvUnit) {
        (&self.a1, &self.a2)
    }
}

/// `ln(1 + e^x)` evaluated as `relu(x) + ln(1 + e^-|x|)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}
