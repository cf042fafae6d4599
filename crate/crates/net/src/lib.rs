pub mod backbone;
pub mod bubf;
pub mod checkpoint;
pub mod dce;
pub mod depth_head;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;
pub mod resample;
pub mod train;

pub use error::{Error, Result};
