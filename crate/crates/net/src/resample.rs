//! Spatial resampling expressed as products with fixed matrices, so every
//! operation is differentiable through plain matmuls.

use bsnet_core::ops::bilinear_matrix;
use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::dce::PoolGeometry;
use crate::Result;

fn to_tensor(m: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = m.dim();
    let data: Vec<f64> = m.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), device)?.to_dtype(dtype)?)
}

/// Applies `m (out x in)` along axis 2 (rows) or 3 (columns) of an NCHW tensor.
fn apply_axis(x: &Tensor, m: &Array2<f64>, axis: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mt = to_tensor(&m.t().to_owned(), x.dtype(), x.device())?;
    let out = m.nrows();
    match axis {
        3 => {
            let y = x.contiguous()?.reshape((n * c * h, w))?.matmul(&mt)?;
            Ok(y.reshape((n, c, h, out))?)
        }
        2 => {
            let xt = x.transpose(2, 3)?.contiguous()?.reshape((n * c * w, h))?;
            let y = xt.matmul(&mt)?.reshape((n, c, w, out))?;
            Ok(y.transpose(2, 3)?.contiguous()?)
        }
        _ => unreachable!("spatial axes are 2 and 3"),
    }
}

fn separable(x: &Tensor, rows: &Array2<f64>, cols: &Array2<f64>) -> Result<Tensor> {
    let y = apply_axis(x, cols, 3)?;
    apply_axis(&y, rows, 2)
}

/// Bilinear resize (half-pixel centers, no corner alignment).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    separable(x, &bilinear_matrix(h, out_h), &bilinear_matrix(w, out_w))
}

fn nearest_double(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((2 * len, len), |(o, i)| if o / 2 == i { 1.0 } else { 0.0 })
}

/// Nearest-neighbor 2x unpooling.
pub fn unpool2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    separable(x, &nearest_double(h), &nearest_double(w))
}

fn pool_matrix(len: usize, n: usize, stride: usize, kernel: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, len), |(o, i)| {
        if i >= o * stride && i < o * stride + kernel {
            1.0 / kernel as f64
        } else {
            0.0
        }
    })
}

/// Average pooling with an explicit window geometry producing an `n x n` grid.
pub fn avg_pool(x: &Tensor, n: usize, g: &PoolGeometry) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    separable(
        x,
        &pool_matrix(h, n, g.stride_h, g.kernel_h),
        &pool_matrix(w, n, g.stride_w, g.kernel_w),
    )
}
