//! Context encoder over the deepest backbone feature: dilated branches, a
//! pointwise branch and the pyramid pooling paths, fused by one 3x3 conv.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::kernels::ConvGeometry;
use crate::layers::{Conv, ConvUnit, Mode, UpProjection};
use crate::params::Scope;
use crate::resample::avg_pool;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub stride_h: usize,
    pub stride_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

/// Stride `floor(len / n)` and kernel `len - (n - 1) * stride` per axis, so
/// the `n` windows run edge to edge.
pub fn pse_pool_geometry(h: usize, w: usize, n: usize) -> Result<PoolGeometry> {
    if n == 0 || n > h.min(w) {
        return Err(Error::BinTooLarge { n, height: h, width: w });
    }
    let stride_h = h / n;
    let stride_w = w / n;
    Ok(PoolGeometry {
        stride_h,
        stride_w,
        kernel_h: h - (n - 1) * stride_h,
        kernel_w: w - (n - 1) * stride_w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DceConfig {
    pub dilation_rates: Vec<usize>,
    pub pse_bins: Vec<usize>,
    pub branch_channels: usize,
    pub out_channels: usize,
}

impl DceConfig {
    pub fn full() -> Self {
        Self {
            dilation_rates: vec![6, 12, 18],
            pse_bins: vec![1, 2, 3, 6],
            branch_channels: 512,
            out_channels: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[usize]| !v.is_empty() && v[0] >= 1 && v.windows(2).all(|p| p[0] < p[1]);
        if !increasing(&self.dilation_rates) {
            return Err(Error::Config("dilation rates must be non-empty, >= 1 and strictly increasing".into()));
        }
        if !increasing(&self.pse_bins) {
            return Err(Error::Config("pooling bins must be non-empty, >= 1 and strictly increasing".into()));
        }
        if self.branch_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("DCE channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenation entering the fusion conv.
    pub fn concat_channels(&self) -> usize {
        (self.dilation_rates.len() + 2) * self.branch_channels
    }
}

/// One pooled path: average pool to `n x n`, 1x1 reduction, up-projection
/// back to the input size. No batch normalization here: a 1x1 grid has no
/// spatial statistics to normalize with.
struct PoolPath {
    n: usize,
    reduce: ConvUnit,
    up: UpProjection,
}

pub struct Pse {
    paths: Vec<PoolPath>,
    fuse: ConvUnit,
}

impl Pse {
    pub fn new(s: &Scope, in_c: usize, cfg: &DceConfig) -> Result<Self> {
        let b = cfg.branch_channels;
        let paths = cfg
            .pse_bins
            .iter()
            .map(|&n| {
                let p = s.sub(format!("bin{n}"));
                Ok(PoolPath {
                    n,
                    reduce: ConvUnit::same(&p.sub("reduce"), in_c, b, 1, false, true)?,
                    up: UpProjection::new(&p.sub("up"), b, b, true, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvUnit::same(&s.sub("fuse"), b * cfg.pse_bins.len(), b, 3, true, true)?;
        Ok(Self { paths, fuse })
    }

    /// The pooled grids before any convolution, one per bin count.
    pub fn pooled(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        self.paths
            .iter()
            .map(|p| avg_pool(x, p.n, &pse_pool_geometry(h, w, p.n)?))
            .collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let pooled = self.pooled(x)?;
        let outs = self
            .paths
            .iter()
            .zip(pooled)
            .map(|(p, g)| p.up.forward(&p.reduce.forward(&g, mode)?, Some((h, w)), mode))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(&Tensor::cat(&outs, 1)?, mode)
    }
}

pub struct Dce {
    in_channels: usize,
    dilated: Vec<(ConvUnit, ConvUnit)>,
    pointwise: (ConvUnit, ConvUnit),
    pse: Pse,
    fuse: Conv,
}

impl Dce {
    pub fn new(s: &Scope, in_c: usize, cfg: &DceConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.branch_channels;
        let dilated = cfg
            .dilation_rates
            .iter()
            .map(|&d| {
                let p = s.sub(format!("dil{d}"));
                Ok((
                    ConvUnit::new(&p.sub("conv"), in_c, b, (3, 3), ConvGeometry::same((3, 3), d), true, true)?,
                    ConvUnit::same(&p.sub("proj"), b, b, 1, true, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let pointwise = (
            ConvUnit::same(&s.sub("point.a"), in_c, b, 1, true, true)?,
            ConvUnit::same(&s.sub("point.b"), b, b, 1, true, true)?,
        );
        let pse = Pse::new(&s.sub("pse"), in_c, cfg)?;
        let fuse = Conv::same(&s.sub("fuse"), cfg.concat_channels(), cfg.out_channels, (3, 3), true)?;
        Ok(Self {
            in_channels: in_c,
            dilated,
            pointwise,
            pse,
            fuse,
        })
    }

    pub fn pse(&self) -> &Pse {
        &self.pse
    }

    /// Concatenated branch outputs ahead of the fusion conv.
    pub fn branches(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                found: c,
            });
        }
        let mut outs = Vec::with_capacity(self.dilated.len() + 2);
        for (conv, proj) in &self.dilated {
            outs.push(proj.forward(&conv.forward(x, mode)?, mode)?);
        }
        outs.push(self.pointwise.1.forward(&self.pointwise.0.forward(x, mode)?, mode)?);
        outs.push(self.pse.forward(x, mode)?);
        Ok(Tensor::cat(&outs, 1)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.fuse.forward(&self.branches(x, mode)?)
    }
}
