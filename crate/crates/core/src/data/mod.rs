//! Sample loading, preprocessing, and synthetic scenes.

mod preprocess;
mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::{read_depth, read_rgb, write_raw_depth, write_rgb};
use crate::map::{DepthMap, RgbImage};
use crate::{Error, Result};

pub use preprocess::{
    apply_augmentation, preprocess_eval, preprocess_train, upsample_prediction, AugmentConfig,
    AugmentParams, PreprocessSpec,
};
pub use synthetic::{generate_synthetic, synthetic_set, SyntheticSceneSpec, MIN_STEP, RECESS_DEPTH};

/// An aligned RGB image and depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub id: String,
}

pub fn load_pair(image_path: &Path, depth_path: &Path) -> Result<SamplePair> {
    let image = read_rgb(image_path)?;
    let depth = read_depth(depth_path)?;
    if (image.height(), image.width()) != depth.dim() {
        return Err(Error::DimensionMismatch {
            image: (image.height(), image.width()),
            depth: depth.dim(),
        });
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SamplePair { image, depth, id })
}

/// Reads `image<TAB>depth` lines; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, depth) = line.split_once('\t').ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("line {}: expected image<TAB>depth", i + 1),
        })?;
        out.push((base.join(img.trim()), base.join(depth.trim())));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SamplePair>> {
    read_manifest(path)?
        .iter()
        .map(|(i, d)| load_pair(i, d))
        .collect()
}

/// Writes each pair as `<id>.png` + `<id>_depth.bsdm` and a `manifest.tsv` listing them.
pub fn write_dataset(dir: &Path, pairs: &[SamplePair]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for pair in pairs {
        let img = format!("{}.png", pair.id);
        let depth = format!("{}_depth.bsdm", pair.id);
        write_rgb(&dir.join(&img), &pair.image)?;
        write_raw_depth(&dir.join(&depth), &pair.depth)?;
        manifest.push_str(&format!("{img}\t{depth}\n"));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Sample order for one epoch; a pure function of `(n, epoch, seed)`.
pub fn epoch_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}
