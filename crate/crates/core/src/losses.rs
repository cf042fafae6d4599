//! Training losses: log depth error, log gradient error, surface-normal error.
//!
//! Each term comes with its analytic gradient with respect to the prediction so
//! a tensor runtime can backpropagate through it without re-deriving anything.
//!
//! Conventions:
//! * spatial gradients use the Sobel operator scaled by 1/8, so a unit ramp has
//!   unit slope;
//! * the gradient term is `ln(|∇x e| + |∇y e| + α)` with `e = |p - g|`;
//! * invalid pixels are excluded from every mean, and a pixel enters the two
//!   gradient-based terms only when its whole 3x3 neighborhood is valid.

use ndarray::{Array2, Array3, ArrayView2, Zip};
use num_traits::Float;

use crate::map::{neighborhood_valid, DepthMap};
use crate::ops::{sobel_adjoint, sobel_gradients_scaled};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.5;
/// Scale applied to the Sobel kernels for loss-side gradients.
pub const GRADIENT_SCALE: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_depth: f64,
    pub l_grad: f64,
    pub l_normal: f64,
    pub l_overall: f64,
    pub n_pixels: usize,
}

impl LossReport {
    pub fn new(l_depth: f64, l_grad: f64, l_normal: f64, n_pixels: usize) -> Self {
        Self {
            l_depth,
            l_grad,
            l_normal,
            l_overall: l_depth + l_grad + l_normal,
            n_pixels,
        }
    }

    /// Unweighted mean of per-sample reports; pixel counts add up.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport::new(
            sum(|r| r.l_depth),
            sum(|r| r.l_grad),
            sum(|r| r.l_normal),
            reports.iter().map(|r| r.n_pixels).sum(),
        ))
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_depth", self.l_depth),
            ("l_grad", self.l_grad),
            ("l_normal", self.l_normal),
            ("l_overall", self.l_overall),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-pixel normals `(-∇x d, -∇y d, 1)`, stored H×W×3, not unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceNormalField {
    pub normals: Array3<f64>,
}

pub fn surface_normals(depth: &DepthMap) -> Result<SurfaceNormalField> {
    let g = sobel_gradients_scaled(depth.values(), GRADIENT_SCALE)?;
    let (h, w) = depth.dim();
    let normals = Array3::from_shape_fn((h, w, 3), |(r, c, k)| match k {
        0 => -g.gx[(r, c)],
        1 => -g.gy[(r, c)],
        _ => 1.0,
    });
    Ok(SurfaceNormalField { normals })
}

/// All three terms and their gradients with respect to the prediction.
///
/// The scalar terms are reduced in `f64` whatever the pixel type.
#[derive(Debug, Clone)]
pub struct LossTerms<T> {
    pub depth: f64,
    pub grad: f64,
    pub normal: f64,
    pub n_pixels: usize,
    pub n_gradient_pixels: usize,
    pub d_depth: Array2<T>,
    pub d_grad: Array2<T>,
    pub d_normal: Array2<T>,
}

impl<T: Float> LossTerms<T> {
    pub fn overall(&self) -> f64 {
        self.depth + self.grad + self.normal
    }

    pub fn d_overall(&self) -> Array2<T> {
        Zip::from(&self.d_depth)
            .and(&self.d_grad)
            .and(&self.d_normal)
            .map_collect(|&a, &b, &c| a + b + c)
    }
}

#[inline]
fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

fn check_inputs<T: Float>(
    p: &ArrayView2<T>,
    g: &ArrayView2<T>,
    valid: &ArrayView2<bool>,
    alpha: T,
) -> Result<()> {
    if p.dim() != g.dim() || p.dim() != valid.dim() {
        return Err(Error::ShapeMismatch(p.shape().to_vec(), g.shape().to_vec()));
    }
    if !(alpha > T::zero()) {
        return Err(Error::NonPositiveAlpha(alpha.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(())
}

/// Mean of `ln(|p - g| + α)` over valid pixels, with its gradient.
///
/// Works on any shape; the Sobel-based terms need at least 3x3.
pub fn depth_term<T: Float>(
    p: ArrayView2<T>,
    g: ArrayView2<T>,
    valid: ArrayView2<bool>,
    alpha: T,
) -> Result<(f64, Array2<T>)> {
    check_inputs(&p, &g, &valid, alpha)?;
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv_n = T::one() / cast::<T>(n as f64);
    let mut value = 0.0f64;
    let mut grad = Array2::zeros(p.dim());
    Zip::from(&mut grad)
        .and(&p)
        .and(&g)
        .and(&valid)
        .for_each(|d, &pv, &gv, &ok| {
            if ok {
                let e = pv - gv;
                value += (e.abs() + alpha).ln().to_f64().unwrap();
                *d = inv_n * sign(e) / (e.abs() + alpha);
            }
        });
    Ok((value / n as f64, grad))
}

/// Evaluates all three terms and their gradients at any float width.
///
/// Per-pixel arithmetic runs in `T`; the means are accumulated in `f64`.
pub fn loss_terms<T: Float>(
    p: ArrayView2<T>,
    g: ArrayView2<T>,
    valid: ArrayView2<bool>,
    alpha: T,
) -> Result<LossTerms<T>> {
    let (depth, d_depth) = depth_term(p, g, valid, alpha)?;
    let n_pixels = valid.iter().filter(|&&v| v).count();
    let scale = cast::<T>(GRADIENT_SCALE);
    let region = neighborhood_valid(valid);
    let m = region.iter().filter(|&&v| v).count();
    let dim = p.dim();
    if m == 0 {
        return Ok(LossTerms {
            depth,
            grad: 0.0,
            normal: 0.0,
            n_pixels,
            n_gradient_pixels: 0,
            d_depth,
            d_grad: Array2::zeros(dim),
            d_normal: Array2::zeros(dim),
        });
    }
    let inv_m = T::one() / cast::<T>(m as f64);

    // Gradient term on e = |p - g|.
    let err = Zip::from(&p).and(&g).map_collect(|&a, &b| a - b);
    let abs_err = err.mapv(|e| e.abs());
    let ge = sobel_gradients_scaled(abs_err.view(), scale)?;
    let mut grad = 0.0f64;
    let mut ux = Array2::zeros(dim);
    let mut uy = Array2::zeros(dim);
    for ((idx, &inside), (&gx, &gy)) in region.indexed_iter().zip(ge.gx.iter().zip(ge.gy.iter())) {
        if !inside {
            continue;
        }
        let arg = gx.abs() + gy.abs() + alpha;
        grad += arg.ln().to_f64().unwrap();
        ux[idx] = inv_m * sign(gx) / arg;
        uy[idx] = inv_m * sign(gy) / arg;
    }
    let d_abs = sobel_adjoint(ux.view(), uy.view(), scale)?;
    let d_grad = Zip::from(&d_abs).and(&err).map_collect(|&d, &e| d * sign(e));

    // Normal term.
    let gp = sobel_gradients_scaled(p, scale)?;
    let gg = sobel_gradients_scaled(g, scale)?;
    let mut normal = 0.0f64;
    let mut vx = Array2::zeros(dim);
    let mut vy = Array2::zeros(dim);
    for (idx, &inside) in region.indexed_iter() {
        if !inside {
            continue;
        }
        let (px, py) = (gp.gx[idx], gp.gy[idx]);
        let (qx, qy) = (gg.gx[idx], gg.gy[idx]);
        let dot = px * qx + py * qy + T::one();
        let np = (px * px + py * py + T::one()).sqrt();
        let nq = (qx * qx + qy * qy + T::one()).sqrt();
        let cos = dot / (np * nq);
        normal += (T::one() - cos).to_f64().unwrap();
        // d(1 - cos)/dpx = -(qx / (np nq) - dot px / (np³ nq))
        let np3 = np * np * np;
        vx[idx] = -inv_m * (qx / (np * nq) - dot * px / (np3 * nq));
        vy[idx] = -inv_m * (qy / (np * nq) - dot * py / (np3 * nq));
    }
    let d_normal = sobel_adjoint(vx.view(), vy.view(), scale)?;

    Ok(LossTerms {
        depth,
        grad: grad / m as f64,
        normal: normal / m as f64,
        n_pixels,
        n_gradient_pixels: m,
        d_depth,
        d_grad,
        d_normal,
    })
}

fn joint_terms(p: &DepthMap, g: &DepthMap, alpha: f64) -> Result<LossTerms<f64>> {
    p.same_shape(g)?;
    let valid = Zip::from(p.valid())
        .and(g.valid())
        .map_collect(|&a, &b| a && b);
    loss_terms(p.values(), g.values(), valid.view(), alpha)
}

pub fn loss_depth(p: &DepthMap, g: &DepthMap, alpha: f64) -> Result<f64> {
    Ok(joint_terms(p, g, alpha)?.depth)
}

pub fn loss_gradient(p: &DepthMap, g: &DepthMap, alpha: f64) -> Result<f64> {
    Ok(joint_terms(p, g, alpha)?.grad)
}

pub fn loss_normal(p: &DepthMap, g: &DepthMap) -> Result<f64> {
    Ok(joint_terms(p, g, DEFAULT_ALPHA)?.normal)
}

pub fn loss_overall(p: &DepthMap, g: &DepthMap, alpha: f64) -> Result<LossReport> {
    let t = joint_terms(p, g, alpha)?;
    Ok(LossReport::new(t.depth, t.grad, t.normal, t.n_pixels))
}

/// Loss report plus the gradient of `l_overall` with respect to `p`'s values.
pub fn loss_and_gradient(
    p: &DepthMap,
    g: &DepthMap,
    alpha: f64,
) -> Result<(LossReport, Array2<f64>)> {
    let t = joint_terms(p, g, alpha)?;
    let report = LossReport::new(t.depth, t.grad, t.normal, t.n_pixels);
    Ok((report, t.d_overall()))
}
