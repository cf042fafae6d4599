//! Numeric building blocks for boundary-aware monocular depth prediction.
//!
//! This crate holds everything that does not need a tensor runtime: depth and
//! image containers, the Sobel/resize/crop operators, the three training loss
//! terms with their analytic gradients, the evaluation metric battery, and the
//! data pipeline (file formats, preprocessing, augmentation, synthetic scenes).

pub mod data;
pub mod error;
pub mod io;
pub mod kv;
pub mod losses;
pub mod map;
pub mod metrics;
pub mod ops;

pub use error::{Error, Result};
pub use map::{DepthMap, GradientPair, RgbImage};
