//! CPU kernels registered as tensor custom ops: 2-D convolution (im2col + gemm)
//! and 3x3 max pooling, each with its own backward pass.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};
use num_traits::Float;

/// Upper bound on im2col scratch elements per chunk.
const CHUNK_ELEMS: usize = 1 << 22;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Worker threads used inside matrix products (1 = sequential).
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

fn parallelism() -> gemm::Parallelism {
    match threads() {
        1 => gemm::Parallelism::None,
        n => gemm::Parallelism::Rayon(n),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeometry {
    /// Stride 1 with padding that preserves the spatial size (odd kernels).
    pub fn same(kernel: (usize, usize), dilation: usize) -> Self {
        Self {
            stride: (1, 1),
            padding: (dilation * (kernel.0 - 1) / 2, dilation * (kernel.1 - 1) / 2),
            dilation: (dilation, dilation),
        }
    }

    /// Output is `ceil(input / stride)` for odd kernels.
    pub fn strided(kernel: (usize, usize), stride: usize, dilation: usize) -> Self {
        Self {
            stride: (stride, stride),
            ..Self::same(kernel, dilation)
        }
    }

    pub fn output_size(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let axis = |len: usize, pad: usize, k: usize, d: usize, s: usize| {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * pad;
            (padded >= span && s > 0).then(|| (padded - span) / s + 1)
        };
        Some((
            axis(input.0, self.padding.0, kernel.0, self.dilation.0, self.stride.0)?,
            axis(input.1, self.padding.1, kernel.1, self.dilation.1, self.stride.1)?,
        ))
    }

    fn pointwise(&self, kernel: (usize, usize)) -> bool {
        kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

trait Element: Float + Send + Sync + std::fmt::Debug + 'static {
    fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [Self]>;
    fn storage(v: Vec<Self>) -> CpuStorage;
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::msg("kernel input must be contiguous")),
    }
}

impl Element for f32 {
    fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
        match s {
            CpuStorage::F32(v) => contiguous(v, l),
            _ => Err(candle_core::Error::msg("dtype mismatch, expected f32")),
        }
    }
    fn storage(v: Vec<f32>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl Element for f64 {
    fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f64]> {
        match s {
            CpuStorage::F64(v) => contiguous(v, l),
            _ => Err(candle_core::Error::msg("dtype mismatch, expected f64")),
        }
    }
    fn storage(v: Vec<f64>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

macro_rules! dispatch {
    ($s:expr, $f:ident ( $($arg:expr),* )) => {
        match $s {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            _ => Err(candle_core::Error::msg("kernels support f32 and f64 only")),
        }
    };
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn chunk(&self) -> usize {
        (CHUNK_ELEMS / self.k().max(1)).clamp(1, self.p().max(1))
    }
}

fn dims(
    x: (usize, usize, usize, usize),
    w: (usize, usize, usize, usize),
    g: &ConvGeometry,
) -> candle_core::Result<ConvDims> {
    let (n, c, h, wd) = x;
    let (o, c2, kh, kw) = w;
    if c != c2 {
        return Err(candle_core::Error::msg(format!(
            "conv input has {c} channels, kernel expects {c2}"
        )));
    }
    let (ho, wo) = g.output_size((h, wd), (kh, kw)).ok_or_else(|| {
        candle_core::Error::msg(format!("{h}x{wd} input is too small for a {kh}x{kw} kernel"))
    })?;
    Ok(ConvDims {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Top-left input coordinate (before kernel offsets) of each output pixel in `p0..p1`.
fn pixel_origins(d: &ConvDims, g: &ConvGeometry, p0: usize, p1: usize) -> Vec<(isize, isize)> {
    (p0..p1)
        .map(|p| {
            let (oy, ox) = (p / d.wo, p % d.wo);
            (
                (oy * g.stride.0) as isize - g.padding.0 as isize,
                (ox * g.stride.1) as isize - g.padding.1 as isize,
            )
        })
        .collect()
}

/// Walks every (kernel row, pixel) pair of a chunk, handing `f(row, col, input_index)`.
#[inline]
fn for_each_tap(
    d: &ConvDims,
    g: &ConvGeometry,
    origins: &[(isize, isize)],
    mut f: impl FnMut(usize, usize, Option<usize>),
) {
    let (h, w) = (d.h as isize, d.w as isize);
    for ci in 0..d.c {
        for ki in 0..d.kh {
            let dy = (ki * g.dilation.0) as isize;
            for kj in 0..d.kw {
                let dx = (kj * g.dilation.1) as isize;
                let row = (ci * d.kh + ki) * d.kw + kj;
                for (j, &(y0, x0)) in origins.iter().enumerate() {
                    let (iy, ix) = (y0 + dy, x0 + dx);
                    let idx = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                        .then(|| ci * d.h * d.w + iy as usize * d.w + ix as usize);
                    f(row, j, idx);
                }
            }
        }
    }
}

fn im2col<T: Element>(x: &[T], d: &ConvDims, g: &ConvGeometry, origins: &[(isize, isize)], cols: &mut [T]) {
    let np = origins.len();
    for_each_tap(d, g, origins, |row, j, idx| {
        cols[row * np + j] = idx.map_or(T::zero(), |i| x[i]);
    });
}

fn col2im<T: Element>(cols: &[T], d: &ConvDims, g: &ConvGeometry, origins: &[(isize, isize)], x: &mut [T]) {
    let np = origins.len();
    for_each_tap(d, g, origins, |row, j, idx| {
        if let Some(i) = idx {
            x[i] = x[i] + cols[row * np + j];
        }
    });
}

/// `dst (m x n) [+]= lhs (m x k) * rhs (k x n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_into<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    dst: *mut T,
    dst_rs: usize,
    accumulate: bool,
    lhs: *const T,
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: *const T,
    rhs_rs: usize,
    rhs_cs: usize,
) {
    gemm::gemm(
        m,
        n,
        k,
        dst,
        1,
        dst_rs as isize,
        accumulate,
        lhs,
        lhs_cs as isize,
        lhs_rs as isize,
        rhs,
        rhs_cs as isize,
        rhs_rs as isize,
        T::one(),
        T::one(),
        false,
        false,
        false,
        parallelism(),
    );
}

fn conv_forward<T: Element>(
    g: &ConvGeometry,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = T::slice(s1, l1)?;
    let w = T::slice(s2, l2)?;
    let d = dims(l1.shape().dims4()?, l2.shape().dims4()?, g)?;
    let (k, p) = (d.k(), d.p());
    let mut out = vec![T::zero(); d.n * d.o * p];
    let pointwise = g.pointwise((d.kh, d.kw));
    let chunk = if pointwise { p } else { d.chunk() };
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * chunk }];
    for n in 0..d.n {
        let xn = &x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let mut p0 = 0;
        while p0 < p {
            let p1 = (p0 + chunk).min(p);
            let np = p1 - p0;
            let (rhs, rhs_rs) = if pointwise {
                (xn.as_ptr(), p)
            } else {
                let origins = pixel_origins(&d, g, p0, p1);
                im2col(xn, &d, g, &origins, &mut cols[..k * np]);
                (cols.as_ptr(), np)
            };
            unsafe {
                gemm_into(
                    d.o,
                    np,
                    k,
                    out.as_mut_ptr().add(n * d.o * p + p0),
                    p,
                    false,
                    w.as_ptr(),
                    k,
                    1,
                    rhs,
                    rhs_rs,
                    1,
                );
            }
            p0 = p1;
        }
    }
    Ok((T::storage(out), Shape::from((d.n, d.o, d.ho, d.wo))))
}

fn conv_input_grad<T: Element>(
    g: &ConvGeometry,
    input_hw: (usize, usize),
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let dy = T::slice(s1, l1)?;
    let w = T::slice(s2, l2)?;
    let (n, o, ho, wo) = l1.shape().dims4()?;
    let (o2, c, kh, kw) = l2.shape().dims4()?;
    let d = dims((n, c, input_hw.0, input_hw.1), (o2, c, kh, kw), g)?;
    if d.o != o || (d.ho, d.wo) != (ho, wo) {
        return Err(candle_core::Error::msg("conv gradient shape mismatch"));
    }
    let (k, p) = (d.k(), d.p());
    let plane = d.c * d.h * d.w;
    let mut dx = vec![T::zero(); d.n * plane];
    let pointwise = g.pointwise((kh, kw));
    let chunk = if pointwise { p } else { d.chunk() };
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * chunk }];
    for n in 0..d.n {
        let mut p0 = 0;
        while p0 < p {
            let p1 = (p0 + chunk).min(p);
            let np = p1 - p0;
            let (dst, dst_rs) = if pointwise {
                (dx[n * plane..].as_mut_ptr(), p)
            } else {
                (cols.as_mut_ptr(), np)
            };
            // cols (k x np) = w^T (k x o) * dy (o x np)
            unsafe {
                gemm_into(
                    k,
                    np,
                    d.o,
                    dst,
                    dst_rs,
                    false,
                    w.as_ptr(),
                    1,
                    k,
                    dy.as_ptr().add(n * d.o * p + p0),
                    p,
                    1,
                );
            }
            if !pointwise {
                let origins = pixel_origins(&d, g, p0, p1);
                col2im(&cols[..k * np], &d, g, &origins, &mut dx[n * plane..(n + 1) * plane]);
            }
            p0 = p1;
        }
    }
    Ok((T::storage(dx), Shape::from((d.n, d.c, d.h, d.w))))
}

fn conv_weight_grad<T: Element>(
    g: &ConvGeometry,
    kernel: (usize, usize),
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = T::slice(s1, l1)?;
    let dy = T::slice(s2, l2)?;
    let (n, c, h, wd) = l1.shape().dims4()?;
    let (_, o, ho, wo) = l2.shape().dims4()?;
    let d = dims((n, c, h, wd), (o, c, kernel.0, kernel.1), g)?;
    if (d.ho, d.wo) != (ho, wo) {
        return Err(candle_core::Error::msg("conv gradient shape mismatch"));
    }
    let (k, p) = (d.k(), d.p());
    let mut dw = vec![T::zero(); o * k];
    let pointwise = g.pointwise(kernel);
    let chunk = if pointwise { p } else { d.chunk() };
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * chunk }];
    let mut first = true;
    for n in 0..d.n {
        let xn = &x[n * c * h * wd..(n + 1) * c * h * wd];
        let mut p0 = 0;
        while p0 < p {
            let p1 = (p0 + chunk).min(p);
            let np = p1 - p0;
            let (rhs, rhs_cs) = if pointwise {
                (xn.as_ptr(), p)
            } else {
                let origins = pixel_origins(&d, g, p0, p1);
                im2col(xn, &d, g, &origins, &mut cols[..k * np]);
                (cols.as_ptr(), np)
            };
            // dw (o x k) += dy (o x np) * cols^T (np x k)
            unsafe {
                gemm_into(
                    o,
                    k,
                    np,
                    dw.as_mut_ptr(),
                    k,
                    !first,
                    dy.as_ptr().add(n * o * p + p0),
                    p,
                    1,
                    rhs,
                    1,
                    rhs_cs,
                );
            }
            first = false;
            p0 = p1;
        }
    }
    Ok((T::storage(dw), Shape::from((o, c, kernel.0, kernel.1))))
}

struct Conv2d {
    geom: ConvGeometry,
}

struct Conv2dInputGrad {
    geom: ConvGeometry,
    input_hw: (usize, usize),
}

struct Conv2dWeightGrad {
    geom: ConvGeometry,
    kernel: (usize, usize),
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "bsnet-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, conv_forward(&self.geom, s1, l1, s2, l2))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let dx = dy.apply_op2_no_bwd(
            w,
            &Conv2dInputGrad {
                geom: self.geom,
                input_hw: (h, wd),
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &dy,
            &Conv2dWeightGrad {
                geom: self.geom,
                kernel: (kh, kw),
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "bsnet-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, conv_input_grad(&self.geom, self.input_hw, s1, l1, s2, l2))
    }
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "bsnet-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, conv_weight_grad(&self.geom, self.kernel, s1, l1, s2, l2))
    }
}

/// Cross-correlation of `x (N,C,H,W)` with `w (O,C,kh,kw)`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    x.apply_op2(&w, Conv2d { geom })
}

/// Max pooling with implicit `-inf` padding; ties route the gradient to the
/// first maximum in scan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |len: usize| {
            let padded = len + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some((axis(h)?, axis(w)?))
    }

    /// Flat input index of the window maximum for every output element.
    fn argmax<T: Element>(&self, x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> candle_core::Result<(Vec<usize>, usize, usize)> {
        let (ho, wo) = self
            .output_size(h, w)
            .ok_or_else(|| candle_core::Error::msg("max-pool input smaller than the window"))?;
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best: Option<(usize, T)> = None;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best.is_none_or(|(_, b)| x[i] > b) {
                                best = Some((i, x[i]));
                            }
                        }
                    }
                    let (i, _) = best.ok_or_else(|| candle_core::Error::msg("empty max-pool window"))?;
                    idx.push(i);
                }
            }
        }
        Ok((idx, ho, wo))
    }
}

fn maxpool_forward<T: Element>(
    op: &MaxPool,
    s: &CpuStorage,
    l: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = T::slice(s, l)?;
    let (n, c, h, w) = l.shape().dims4()?;
    let (idx, ho, wo) = op.argmax(x, (n, c, h, w))?;
    let out = idx.iter().map(|&i| x[i]).collect();
    Ok((T::storage(out), Shape::from((n, c, ho, wo))))
}

fn maxpool_backward<T: Element>(
    op: &MaxPool,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = T::slice(s1, l1)?;
    let dy = T::slice(s2, l2)?;
    let shape = l1.shape().dims4()?;
    let (idx, _, _) = op.argmax(x, shape)?;
    if idx.len() != dy.len() {
        return Err(candle_core::Error::msg("max-pool gradient shape mismatch"));
    }
    let mut dx = vec![T::zero(); x.len()];
    for (&i, &g) in idx.iter().zip(dy) {
        dx[i] = dx[i] + g;
    }
    Ok((T::storage(dx), l1.shape().clone()))
}

struct MaxPoolGrad(MaxPool);

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "bsnet-maxpool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, maxpool_forward(self, s, l))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, dy: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&dy.contiguous()?, &MaxPoolGrad(*self))?))
    }
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "bsnet-maxpool-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, maxpool_backward(&self.0, s1, l1, s2, l2))
    }
}

pub fn max_pool(x: &Tensor, op: MaxPool) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Vec<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let (ho, wo) = g.output_size((h, wd), (kh, kw)).unwrap();
        let (xv, wv) = (flat(x), flat(w));
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += xv[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * wv[((oc * c + ic) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn geometries() -> Vec<((usize, usize), ConvGeometry)> {
        vec![
            ((3, 3), ConvGeometry::same((3, 3), 1)),
            ((1, 1), ConvGeometry::same((1, 1), 1)),
            ((3, 3), ConvGeometry::same((3, 3), 2)),
            ((7, 7), ConvGeometry::strided((7, 7), 2, 1)),
            ((3, 3), ConvGeometry::strided((3, 3), 2, 1)),
            ((1, 1), ConvGeometry::strided((1, 1), 2, 1)),
            ((3, 11), ConvGeometry::same((3, 11), 1)),
            ((11, 3), ConvGeometry::same((11, 3), 1)),
            ((5, 5), ConvGeometry::same((5, 5), 1)),
        ]
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (kernel, g) in geometries() {
            for (h, w) in [(9, 12), (8, 7), (13, 13)] {
                let x = random(&[2, 3, h, w], &mut rng, DType::F64);
                let wt = random(&[4, 3, kernel.0, kernel.1], &mut rng, DType::F64);
                let y = conv2d(&x, &wt, g).unwrap();
                let expected = naive_conv(&x, &wt, &g);
                for (a, b) in flat(&y).iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-12, "{kernel:?} {g:?}");
                }
            }
        }
    }

    #[test]
    fn forward_matches_library_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 11, 14], &mut rng, DType::F32);
        let w = random(&[6, 5, 3, 3], &mut rng, DType::F32);
        for (pad, stride, dil) in [(1, 1, 1), (1, 2, 1), (2, 1, 2), (0, 1, 1)] {
            let g = ConvGeometry {
                stride: (stride, stride),
                padding: (pad, pad),
                dilation: (dil, dil),
            };
            let ours = flat(&conv2d(&x, &w, g).unwrap());
            let theirs = flat(&x.conv2d(&w, pad, stride, dil, 1).unwrap());
            assert_eq!(ours.len(), theirs.len());
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (kernel, g) in geometries() {
            let x = Var::from_tensor(&random(&[2, 2, 7, 8], &mut rng, DType::F64)).unwrap();
            let w = Var::from_tensor(&random(&[3, 2, kernel.0, kernel.1], &mut rng, DType::F64)).unwrap();
            let y = conv2d(&x, &w, g).unwrap();
            let r = random(y.dims(), &mut rng, DType::F64);
            let loss = |x: &Tensor, w: &Tensor| -> f64 {
                conv2d(x, w, g).unwrap().mul(&r).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let grads = y.mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
            for (var, grad) in [(&x, grads.get(&x).unwrap()), (&w, grads.get(&w).unwrap())] {
                let base = flat(var.as_tensor());
                let analytic = flat(grad);
                for i in (0..base.len()).step_by(7) {
                    let eps = 1e-6;
                    let mut plus = base.clone();
                    plus[i] += eps;
                    let mut minus = base.clone();
                    minus[i] -= eps;
                    let shaped = |v: Vec<f64>| Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap();
                    let (fp, fm) = if std::ptr::eq(var, &x) {
                        (loss(&shaped(plus), &w), loss(&shaped(minus), &w))
                    } else {
                        (loss(&x, &shaped(plus)), loss(&x, &shaped(minus)))
                    };
                    let fd = (fp - fm) / (2.0 * eps);
                    assert!((fd - analytic[i]).abs() < 1e-6, "{kernel:?} {g:?} idx {i}: {fd} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn chunked_path_matches_single_chunk() {
        // Large kernel volume forces several pixel chunks.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 700;
        let x = random(&[1, c, 40, 40], &mut rng, DType::F32);
        let w = random(&[2, c, 5, 5], &mut rng, DType::F32);
        let g = ConvGeometry::same((5, 5), 1);
        assert!(CHUNK_ELEMS / (c * 25) < 1600);
        let ours = flat(&conv2d(&x, &w, g).unwrap());
        let theirs = flat(&x.conv2d(&w, 2, 1, 1, 1).unwrap());
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn max_pool_forward_and_routing() {
        let x = Tensor::from_vec(
            (0..25).map(|v| ((v * 7) % 11) as f64).collect::<Vec<_>>(),
            (1, 1, 5, 5),
            &Device::Cpu,
        )
        .unwrap();
        let op = MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let y = max_pool(&x, op).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        let xv = flat(&x);
        let yv = flat(&y);
        for oy in 0..3usize {
            for ox in 0..3usize {
                let mut m = f64::NEG_INFINITY;
                for iy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(5) {
                    for ix in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(5) {
                        m = m.max(xv[iy * 5 + ix]);
                    }
                }
                assert_eq!(yv[oy * 3 + ox], m);
            }
        }
        let xv = Var::from_tensor(&x).unwrap();
        let grads = max_pool(&xv, op).unwrap().sum_all().unwrap().backward().unwrap();
        let g = flat(grads.get(&xv).unwrap());
        assert_eq!(g.iter().sum::<f64>(), 9.0);
        assert!(g.iter().all(|&v| v == v.round() && v >= 0.0));
        assert_eq!(op.output_size(114, 152), Some((57, 76)));
    }

    #[test]
    fn f32_and_f64_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 3, 9, 9], &mut rng, DType::F64);
        let w = random(&[2, 3, 3, 3], &mut rng, DType::F64);
        let g = ConvGeometry::strided((3, 3), 2, 1);
        let a = flat(&conv2d(&x, &w, g).unwrap());
        let b = flat(&conv2d(&x.to_dtype(DType::F32).unwrap(), &w.to_dtype(DType::F32).unwrap(), g).unwrap());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}
