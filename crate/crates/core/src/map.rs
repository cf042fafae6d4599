//! Depth and image containers.

use ndarray::{Array2, Array3, ArrayView2, Zip};

use crate::{Error, Result};

/// Smallest side accepted by [`DepthMap`]; the Sobel operator needs a 3x3 neighborhood.
pub const MIN_MAP_SIDE: usize = 3;

/// Single-channel depth in meters with a validity mask.
///
/// Pixels where the mask is false carry no information (sensor holes); their
/// stored value is ignored by losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::ShapeMismatch(
                values.shape().to_vec(),
                valid.shape().to_vec(),
            ));
        }
        check_min_side(values.nrows(), values.ncols())?;
        let bad = Zip::from(&values)
            .and(&valid)
            .fold(false, |acc, &v, &ok| acc || (ok && !(v >= 0.0 && v.is_finite())));
        if bad {
            return Err(Error::InvalidDepth(
                "valid pixels must hold finite non-negative depth".into(),
            ));
        }
        Ok(Self { values, valid })
    }

    /// Every pixel valid.
    pub fn dense(values: Array2<f64>) -> Result<Self> {
        let valid = Array2::from_elem(values.dim(), true);
        Self::new(values, valid)
    }

    /// Zero (and non-finite) depths become invalid pixels, the Kinect hole convention.
    pub fn from_sensor(values: Array2<f64>) -> Result<Self> {
        let valid = values.mapv(|v| v > 0.0 && v.is_finite());
        let values = Zip::from(&values)
            .and(&valid)
            .map_collect(|&v, &ok| if ok { v } else { 0.0 });
        Self::new(values, valid)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::dense(Array2::from_elem((height, width), value))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn valid(&self) -> ArrayView2<'_, bool> {
        self.valid.view()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<bool>) {
        (self.values, self.valid)
    }

    /// Multiplies every depth by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.mapv(|v| v * factor), self.valid.clone())
    }

    pub(crate) fn same_shape(&self, other: &DepthMap) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(
                self.values.shape().to_vec(),
                other.values.shape().to_vec(),
            ));
        }
        Ok(())
    }
}

/// Three-channel image, channel-first, every entry in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    values: Array3<f64>,
}

impl RgbImage {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage("empty image".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("entries must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.values
    }
}

/// Horizontal and vertical spatial gradients of a map.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair<T = f64> {
    pub gx: Array2<T>,
    pub gy: Array2<T>,
}

impl GradientPair<f64> {
    pub fn magnitude(&self) -> Array2<f64> {
        Zip::from(&self.gx)
            .and(&self.gy)
            .map_collect(|&x, &y| (x * x + y * y).sqrt())
    }
}

pub(crate) fn check_min_side(height: usize, width: usize) -> Result<()> {
    if height < MIN_MAP_SIDE || width < MIN_MAP_SIDE {
        return Err(Error::ShapeTooSmall {
            height,
            width,
            min: MIN_MAP_SIDE,
        });
    }
    Ok(())
}

/// True where the full (edge-replicated) 3x3 neighborhood is valid.
pub fn neighborhood_valid(valid: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = valid.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        (-1isize..=1).all(|dr| {
            (-1isize..=1).all(|dc| {
                let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                valid[(rr, cc)]
            })
        })
    })
}
