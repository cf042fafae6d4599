//! Low-level image operators: Sobel gradients, bilinear resize, center crop.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_traits::Float;

use crate::map::{check_min_side, DepthMap, GradientPair};
use crate::{Error, Result};

/// Horizontal Sobel kernel, applied as a correlation: `gx(r, c) = sum K[i][j] * m(r+i-1, c+j-1)`.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical Sobel kernel (transpose of [`SOBEL_X`]).
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_index(i: usize, d: isize, len: usize) -> usize {
    (i as isize + d).clamp(0, len as isize - 1) as usize
}

/// Un-normalized 3x3 Sobel gradients with replicate-padded borders.
pub fn sobel_gradients<T: Float>(map: ArrayView2<T>) -> Result<GradientPair<T>> {
    sobel_gradients_scaled(map, T::one())
}

/// Sobel gradients multiplied by `scale`.
pub fn sobel_gradients_scaled<T: Float>(map: ArrayView2<T>, scale: T) -> Result<GradientPair<T>> {
    let (h, w) = map.dim();
    check_min_side(h, w)?;
    let kx = kernel::<T>(&SOBEL_X, scale);
    let ky = kernel::<T>(&SOBEL_Y, scale);
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut ax = T::zero();
            let mut ay = T::zero();
            for (i, dr) in (-1isize..=1).enumerate() {
                let rr = clamp_index(r, dr, h);
                for (j, dc) in (-1isize..=1).enumerate() {
                    let v = map[(rr, clamp_index(c, dc, w))];
                    ax = ax + kx[i][j] * v;
                    ay = ay + ky[i][j] * v;
                }
            }
            gx[(r, c)] = ax;
            gy[(r, c)] = ay;
        }
    }
    Ok(GradientPair { gx, gy })
}

/// Adjoint of [`sobel_gradients_scaled`]: returns `Sxᵀ ux + Syᵀ uy`.
///
/// Replicate padding makes the forward operator a linear map on the H×W grid;
/// border taps fold back onto the clamped pixel, so the adjoint scatters there too.
pub fn sobel_adjoint<T: Float>(ux: ArrayView2<T>, uy: ArrayView2<T>, scale: T) -> Result<Array2<T>> {
    if ux.dim() != uy.dim() {
        return Err(Error::ShapeMismatch(ux.shape().to_vec(), uy.shape().to_vec()));
    }
    let (h, w) = ux.dim();
    check_min_side(h, w)?;
    let kx = kernel::<T>(&SOBEL_X, scale);
    let ky = kernel::<T>(&SOBEL_Y, scale);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (ux[(r, c)], uy[(r, c)]);
            if a == T::zero() && b == T::zero() {
                continue;
            }
            for (i, dr) in (-1isize..=1).enumerate() {
                let rr = clamp_index(r, dr, h);
                for (j, dc) in (-1isize..=1).enumerate() {
                    let cc = clamp_index(c, dc, w);
                    out[(rr, cc)] = out[(rr, cc)] + kx[i][j] * a + ky[i][j] * b;
                }
            }
        }
    }
    Ok(out)
}

fn kernel<T: Float>(k: &[[f64; 3]; 3], scale: T) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = T::from(k[i][j]).unwrap() * scale;
        }
    }
    out
}

/// Sampling taps of align-corners-false bilinear interpolation along one axis.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: Vec<f64>,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> AxisTaps {
    let scale = in_len as f64 / out_len as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for dst in 0..out_len {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac);
    }
    taps
}

/// Dense `out_len × in_len` interpolation matrix for one axis.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let taps = bilinear_taps(in_len, out_len);
    let mut m = Array2::zeros((out_len, in_len));
    for o in 0..out_len {
        m[(o, taps.lo[o])] += 1.0 - taps.frac[o];
        m[(o, taps.hi[o])] += taps.frac[o];
    }
    m
}

/// Align-corners-false bilinear resize of a channel-first array.
pub fn resize_bilinear(map: ArrayView3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (ch, h, w) = map.dim();
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimension {
            height: out_h,
            width: out_w,
        });
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidDimension { height: h, width: w });
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Array3::zeros((ch, out_h, out_w));
    for c in 0..ch {
        let plane = map.index_axis(Axis(0), c);
        for y in 0..out_h {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for x in 0..out_w {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let top = plane[(y0, x0)] * (1.0 - fx) + plane[(y0, x1)] * fx;
                let bottom = plane[(y1, x0)] * (1.0 - fx) + plane[(y1, x1)] * fx;
                out[(c, y, x)] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of a depth map; an output pixel is valid only when every
/// source pixel with nonzero weight is valid.
pub fn resize_depth(depth: &DepthMap, out_h: usize, out_w: usize) -> Result<DepthMap> {
    let (h, w) = depth.dim();
    if (h, w) == (out_h, out_w) {
        return Ok(depth.clone());
    }
    let values = depth.values().insert_axis(Axis(0));
    let resized = resize_bilinear(values, out_h, out_w)?.index_axis_move(Axis(0), 0);
    let valid_in = depth.valid();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let valid = Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let rows = [(ty.lo[y], 1.0 - ty.frac[y]), (ty.hi[y], ty.frac[y])];
        let cols = [(tx.lo[x], 1.0 - tx.frac[x]), (tx.hi[x], tx.frac[x])];
        rows.iter().all(|&(r, wr)| {
            cols.iter()
                .all(|&(c, wc)| wr * wc == 0.0 || valid_in[(r, c)])
        })
    });
    let values = ndarray::Zip::from(&resized)
        .and(&valid)
        .map_collect(|&v, &ok| if ok { v } else { 0.0 });
    DepthMap::new(values, valid)
}

/// Top-left offset of a centered crop; odd surplus goes to the bottom/right.
pub fn crop_offsets(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    if out_h > h || out_w > w {
        return Err(Error::CropTooLarge {
            out_h,
            out_w,
            height: h,
            width: w,
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimension {
            height: out_h,
            width: out_w,
        });
    }
    Ok(((h - out_h) / 2, (w - out_w) / 2))
}

pub fn center_crop<T: Clone>(map: ArrayView3<T>, out_h: usize, out_w: usize) -> Result<Array3<T>> {
    let (_, h, w) = map.dim();
    let (r0, c0) = crop_offsets(h, w, out_h, out_w)?;
    Ok(map.slice(s![.., r0..r0 + out_h, c0..c0 + out_w]).to_owned())
}

pub fn crop_depth(depth: &DepthMap, out_h: usize, out_w: usize) -> Result<DepthMap> {
    let (h, w) = depth.dim();
    let (r0, c0) = crop_offsets(h, w, out_h, out_w)?;
    let window = s![r0..r0 + out_h, c0..c0 + out_w];
    DepthMap::new(
        depth.values().slice(window).to_owned(),
        depth.valid().slice(window).to_owned(),
    )
}
