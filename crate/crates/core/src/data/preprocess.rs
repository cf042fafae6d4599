//! Resize / crop / augment pipeline shared by training and evaluation.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::map::{DepthMap, RgbImage};
use crate::ops::{crop_depth, center_crop, resize_bilinear, resize_depth};
use crate::{Error, Result};

use super::SamplePair;

/// Toggles and ranges for training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    pub max_rotation_deg: f64,
    pub max_scale: f64,
    pub color_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            max_rotation_deg: 5.0,
            max_scale: 1.5,
            color_range: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    pub fn flip_only() -> Self {
        Self {
            flip: true,
            max_rotation_deg: 0.0,
            max_scale: 1.0,
            color_range: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resize_to: (usize, usize),
    pub crop_to: (usize, usize),
    pub label_size: (usize, usize),
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl PreprocessSpec {
    /// 480x640 Kinect frames: resize to 240x320, crop 228x304, labels at 114x152.
    pub fn nyud() -> Self {
        Self {
            resize_to: (240, 320),
            crop_to: (228, 304),
            label_size: (114, 152),
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }

    /// Square inputs used as-is, labels at half resolution.
    pub fn square(side: usize) -> Self {
        Self {
            resize_to: (side, side),
            crop_to: (side, side),
            label_size: (side / 2, side / 2),
            augment: false,
            augmentation: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (rh, rw) = self.resize_to;
        let (ch, cw) = self.crop_to;
        if ch > rh || cw > rw {
            return Err(Error::CropTooLarge {
                out_h: ch,
                out_w: cw,
                height: rh,
                width: rw,
            });
        }
        if self.label_size != (ch / 2, cw / 2) || ch % 2 != 0 || cw % 2 != 0 {
            return Err(Error::InvalidSpec(format!(
                "label size {:?} must be half of the even crop {:?}",
                self.label_size, self.crop_to
            )));
        }
        let a = &self.augmentation;
        if a.max_scale < 1.0 || a.max_rotation_deg < 0.0 || a.color_range.0 > a.color_range.1 || a.color_range.0 < 0.0 {
            return Err(Error::InvalidSpec(format!("bad augmentation ranges {a:?}")));
        }
        Ok(())
    }
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_rad: f64,
    pub scale: f64,
    pub color: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle_rad: 0.0,
            scale: 1.0,
            color: [1.0; 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = cfg.flip && rng.random_bool(0.5);
        let angle_rad = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let scale = if cfg.max_scale > 1.0 {
            rng.random_range(1.0..=cfg.max_scale)
        } else {
            1.0
        };
        let (lo, hi) = cfg.color_range;
        let mut color = [1.0; 3];
        if hi > lo {
            for c in &mut color {
                *c = rng.random_range(lo..=hi);
            }
        }
        Self {
            flip,
            angle_rad,
            scale,
            color,
        }
    }

    /// Source coordinate `(row, col)` sampled for output pixel `(r, c)` of an `h`x`w` frame.
    pub fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut x = c as f64 - cx;
        let y = r as f64 - cy;
        if self.flip {
            x = -x;
        }
        let (s, co) = self.angle_rad.sin_cos();
        let xr = (co * x + s * y) / self.scale;
        let yr = (-s * x + co * y) / self.scale;
        (yr + cy, xr + cx)
    }
}

fn bilinear_at(plane: ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[(y0, x0)] * (1.0 - fx) + plane[(y0, x1)] * fx;
    let bot = plane[(y1, x0)] * (1.0 - fx) + plane[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies one parameter draw to an aligned image/depth pair.
///
/// The image is sampled bilinearly with edge clamping; depth uses nearest
/// neighbor, is divided by the scale factor, and is invalid outside the frame.
pub fn apply_augmentation(
    image: &RgbImage,
    depth: &DepthMap,
    params: &AugmentParams,
) -> Result<(RgbImage, DepthMap)> {
    let (h, w) = depth.dim();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::DimensionMismatch {
            image: (image.height(), image.width()),
            depth: (h, w),
        });
    }
    let src = image.values();
    let mut out = Array3::zeros((3, h, w));
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let (dv, dm) = (depth.values(), depth.valid());
    for r in 0..h {
        for c in 0..w {
            let (y, x) = params.source(r, c, h, w);
            for ch in 0..3 {
                let v = bilinear_at(src.index_axis(ndarray::Axis(0), ch), y, x);
                out[(ch, r, c)] = (v * params.color[ch]).clamp(0.0, 1.0);
            }
            let (yn, xn) = (y.round(), x.round());
            if yn >= 0.0 && xn >= 0.0 && (yn as usize) < h && (xn as usize) < w {
                let idx = (yn as usize, xn as usize);
                if dm[idx] {
                    values[(r, c)] = dv[idx] / params.scale;
                    valid[(r, c)] = true;
                }
            }
        }
    }
    Ok((RgbImage::new(out)?, DepthMap::new(values, valid)?))
}

fn check_pair(pair: &SamplePair, spec: &PreprocessSpec) -> Result<()> {
    spec.validate()?;
    let (h, w) = pair.depth.dim();
    if (pair.image.height(), pair.image.width()) != (h, w) {
        return Err(Error::DimensionMismatch {
            image: (pair.image.height(), pair.image.width()),
            depth: (h, w),
        });
    }
    let (ch, cw) = spec.crop_to;
    if h < ch || w < cw {
        return Err(Error::CropTooLarge {
            out_h: ch,
            out_w: cw,
            height: h,
            width: w,
        });
    }
    Ok(())
}

fn resize_and_crop(pair: &SamplePair, spec: &PreprocessSpec) -> Result<(RgbImage, DepthMap)> {
    let (rh, rw) = spec.resize_to;
    let (ch, cw) = spec.crop_to;
    let img = resize_bilinear(pair.image.values().view(), rh, rw)?;
    let img = center_crop(img.view(), ch, cw)?.mapv(|v| v.clamp(0.0, 1.0));
    let depth = crop_depth(&resize_depth(&pair.depth, rh, rw)?, ch, cw)?;
    Ok((RgbImage::new(img)?, depth))
}

/// Training pipeline: resize, crop, optional augmentation, label downsampling.
pub fn preprocess_train<R: Rng + ?Sized>(
    pair: &SamplePair,
    spec: &PreprocessSpec,
    rng: &mut R,
) -> Result<(RgbImage, DepthMap)> {
    check_pair(pair, spec)?;
    let (mut image, mut depth) = resize_and_crop(pair, spec)?;
    if spec.augment {
        let params = AugmentParams::sample(&spec.augmentation, rng);
        (image, depth) = apply_augmentation(&image, &depth, &params)?;
    }
    let (lh, lw) = spec.label_size;
    Ok((image, resize_depth(&depth, lh, lw)?))
}

/// Evaluation pipeline: resize and crop only; ground truth stays at crop size.
pub fn preprocess_eval(pair: &SamplePair, spec: &PreprocessSpec) -> Result<(RgbImage, DepthMap)> {
    check_pair(pair, spec)?;
    resize_and_crop(pair, spec)
}

/// Brings a network prediction to the ground-truth resolution before scoring.
pub fn upsample_prediction(pred: &DepthMap, height: usize, width: usize) -> Result<DepthMap> {
    resize_depth(pred, height, width)
}
