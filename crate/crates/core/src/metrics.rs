//! Evaluation metrics: pixel accuracy, Sobel boundary P/R/F1, farthest-region error.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::map::{neighborhood_valid, DepthMap};
use crate::ops::sobel_gradients;
use crate::{Error, Result};

/// Boundary thresholds used for reports comparable to published NYUD results.
pub const BOUNDARY_THRESHOLDS: [f64; 3] = [0.25, 0.5, 1.0];
pub const DELTA_BASE: f64 = 1.25;

/// The single place where the δ comparison strictness lives.
#[inline]
pub fn delta_passes(ratio: f64, threshold: f64) -> bool {
    ratio < threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
}

/// Running sums so pixel metrics can be pooled over many images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelAccumulator {
    pub count: usize,
    pub delta_hits: [usize; 3],
    pub sum_rel: f64,
    pub sum_sq: f64,
    pub sum_log10: f64,
}

impl PixelAccumulator {
    pub fn add_pixel(&mut self, p: f64, g: f64) {
        let ratio = (p / g).max(g / p);
        for (k, hit) in self.delta_hits.iter_mut().enumerate() {
            if delta_passes(ratio, DELTA_BASE.powi(k as i32 + 1)) {
                *hit += 1;
            }
        }
        self.sum_rel += (p - g).abs() / g;
        self.sum_sq += (p - g) * (p - g);
        self.sum_log10 += (p.log10() - g.log10()).abs();
        self.count += 1;
    }

    pub fn merge(&mut self, other: &PixelAccumulator) {
        self.count += other.count;
        for k in 0..3 {
            self.delta_hits[k] += other.delta_hits[k];
        }
        self.sum_rel += other.sum_rel;
        self.sum_sq += other.sum_sq;
        self.sum_log10 += other.sum_log10;
    }

    pub fn finish(&self) -> Result<PixelMetrics> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        Ok(PixelMetrics {
            delta1: self.delta_hits[0] as f64 / n,
            delta2: self.delta_hits[1] as f64 / n,
            delta3: self.delta_hits[2] as f64 / n,
            rel: self.sum_rel / n,
            rms: (self.sum_sq / n).sqrt(),
            log10: self.sum_log10 / n,
        })
    }
}

/// Pixels valid in both maps with positive ground truth.
fn pixel_accumulator(p: &DepthMap, g: &DepthMap) -> Result<PixelAccumulator> {
    p.same_shape(g)?;
    let mut acc = PixelAccumulator::default();
    let (pv, gv) = (p.values(), g.values());
    let (pm, gm) = (p.valid(), g.valid());
    for ((idx, &gd), &pd) in gv.indexed_iter().zip(pv.iter()) {
        if !(pm[idx] && gm[idx]) || gd <= 0.0 {
            continue;
        }
        if pd <= 0.0 {
            return Err(Error::InvalidDepth(format!(
                "prediction must be positive at {idx:?}, found {pd}"
            )));
        }
        acc.add_pixel(pd, gd);
    }
    Ok(acc)
}

pub fn pixel_metrics(p: &DepthMap, g: &DepthMap) -> Result<PixelMetrics> {
    pixel_accumulator(p, g)?.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMetrics {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BoundaryMetrics {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            threshold,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Un-normalized Sobel magnitude above `t_e`.
pub fn boundary_mask(values: ArrayView2<f64>, t_e: f64) -> Result<Array2<bool>> {
    Ok(sobel_gradients(values)?.magnitude().mapv(|m| m > t_e))
}

/// Only pixels whose 3x3 neighborhood is valid in both maps are scored.
pub fn boundary_metrics(p: &DepthMap, g: &DepthMap, t_e: f64) -> Result<BoundaryMetrics> {
    p.same_shape(g)?;
    let both = Zip::from(p.valid())
        .and(g.valid())
        .map_collect(|&a, &b| a && b);
    let region = neighborhood_valid(both.view());
    let pm = boundary_mask(p.values(), t_e)?;
    let gm = boundary_mask(g.values(), t_e)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    Zip::from(&region)
        .and(&pm)
        .and(&gm)
        .for_each(|&inside, &a, &b| {
            if inside {
                match (a, b) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        });
    Ok(BoundaryMetrics::from_counts(t_e, tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarthestRegionResult {
    pub m: usize,
    /// (row, column), 1-based.
    pub pred_cell: (usize, usize),
    pub gt_cell: (usize, usize),
    pub error: f64,
}

/// Boundary `k` of an `m`-way split of `len`: `round(k * len / m)`, halves rounded up.
pub fn cell_edge(k: usize, len: usize, m: usize) -> usize {
    (2 * k * len + m) / (2 * m)
}

/// Cell of the `m`x`m` grid with the largest mean valid depth, 1-based.
///
/// Cells without valid pixels are skipped; ties go to the first cell in
/// row-major order. Returns `None` when no cell has a valid pixel.
pub fn farthest_cell(depth: &DepthMap, m: usize) -> Result<Option<(usize, usize)>> {
    let (h, w) = depth.dim();
    if m == 0 || m > h || m > w {
        return Err(Error::GridTooLarge {
            m,
            height: h,
            width: w,
        });
    }
    let (values, valid) = (depth.values(), depth.valid());
    let mut best: Option<((usize, usize), f64)> = None;
    for u in 0..m {
        let (r0, r1) = (cell_edge(u, h, m), cell_edge(u + 1, h, m));
        for v in 0..m {
            let (c0, c1) = (cell_edge(v, w, m), cell_edge(v + 1, w, m));
            let (mut sum, mut n) = (0.0, 0usize);
            for r in r0..r1 {
                for c in c0..c1 {
                    if valid[(r, c)] {
                        sum += values[(r, c)];
                        n += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let mean = sum / n as f64;
            if best.map_or(true, |(_, b)| mean > b) {
                best = Some(((u + 1, v + 1), mean));
            }
        }
    }
    Ok(best.map(|(cell, _)| cell))
}

pub fn farthest_region_error(p: &DepthMap, g: &DepthMap, m: usize) -> Result<FarthestRegionResult> {
    p.same_shape(g)?;
    let pred_cell = farthest_cell(p, m)?.ok_or(Error::NoValidPixels)?;
    let gt_cell = farthest_cell(g, m)?.ok_or(Error::NoValidPixels)?;
    let du = pred_cell.0 as f64 - gt_cell.0 as f64;
    let dv = pred_cell.1 as f64 - gt_cell.1 as f64;
    let error = (du * du + dv * dv).sqrt() / (m as f64 * std::f64::consts::SQRT_2);
    Ok(FarthestRegionResult {
        m,
        pred_cell,
        gt_cell,
        error,
    })
}

/// Which metrics a record carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub boundary_thresholds: Vec<f64>,
    pub grid_sizes: Vec<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            boundary_thresholds: BOUNDARY_THRESHOLDS.to_vec(),
            grid_sizes: vec![2, 6, 12],
        }
    }
}

/// Everything measured on one image, kept in poolable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub pixels: PixelAccumulator,
    pub boundaries: Vec<BoundaryMetrics>,
    pub farthest: Vec<FarthestRegionResult>,
}

impl ImageRecord {
    pub fn measure(p: &DepthMap, g: &DepthMap, config: &MetricConfig) -> Result<Self> {
        let pixels = pixel_accumulator(p, g)?;
        let boundaries = config
            .boundary_thresholds
            .iter()
            .map(|&t| boundary_metrics(p, g, t))
            .collect::<Result<_>>()?;
        let farthest = config
            .grid_sizes
            .iter()
            .map(|&m| farthest_region_error(p, g, m))
            .collect::<Result<_>>()?;
        Ok(Self {
            pixels,
            boundaries,
            farthest,
        })
    }
}

/// Dataset-level metrics as ordered `(key, value)` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixel: PixelMetrics,
    pub boundaries: Vec<BoundaryMetrics>,
    /// `(m, mean error)`.
    pub farthest: Vec<(usize, f64)>,
    pub n_images: usize,
}

pub fn aggregate_over_dataset(records: &[ImageRecord]) -> Result<MetricReport> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let mut pixels = PixelAccumulator::default();
    let mut counts: Vec<(f64, usize, usize, usize)> = first
        .boundaries
        .iter()
        .map(|b| (b.threshold, 0, 0, 0))
        .collect();
    let mut farthest: Vec<(usize, f64)> = first.farthest.iter().map(|f| (f.m, 0.0)).collect();
    for rec in records {
        if rec.boundaries.len() != counts.len() || rec.farthest.len() != farthest.len() {
            return Err(Error::InvalidSpec("records measured with different configs".into()));
        }
        pixels.merge(&rec.pixels);
        for (acc, b) in counts.iter_mut().zip(&rec.boundaries) {
            acc.1 += b.tp;
            acc.2 += b.fp;
            acc.3 += b.fn_;
        }
        for (acc, f) in farthest.iter_mut().zip(&rec.farthest) {
            acc.1 += f.error;
        }
    }
    let n = records.len() as f64;
    Ok(MetricReport {
        pixel: pixels.finish()?,
        boundaries: counts
            .into_iter()
            .map(|(t, tp, fp, fn_)| BoundaryMetrics::from_counts(t, tp, fp, fn_))
            .collect(),
        farthest: farthest.into_iter().map(|(m, e)| (m, e / n)).collect(),
        n_images: records.len(),
    })
}

impl MetricReport {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let p = &self.pixel;
        let mut out = vec![
            ("delta1".to_string(), p.delta1),
            ("delta2".to_string(), p.delta2),
            ("delta3".to_string(), p.delta3),
            ("rel".to_string(), p.rel),
            ("rms".to_string(), p.rms),
            ("log10".to_string(), p.log10),
        ];
        for b in &self.boundaries {
            let t = b.threshold;
            out.push((format!("boundary_p_{t}"), b.precision));
            out.push((format!("boundary_r_{t}"), b.recall));
            out.push((format!("boundary_f1_{t}"), b.f1));
        }
        for &(m, e) in &self.farthest {
            out.push((format!("farthest_e_m{m}"), e));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .entries()
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::from(v)))
            .collect::<serde_json::Map<_, _>>();
        serde_json::Value::Object(map)
    }
}
