//! Procedural RGB-D scenes: a far background plane with nearer boxes.
//!
//! Every depth discontinuity is a step of at least [`MIN_STEP`] meters, and
//! optionally one cell of an m x m grid is recessed so that it is the farthest.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::map::{DepthMap, RgbImage};
use crate::metrics::cell_edge;
use crate::{Error, Result};

use super::SamplePair;

pub const MIN_STEP: f64 = 0.5;
/// Extra depth of a pinned far recess beyond the background plane.
pub const RECESS_DEPTH: f64 = 0.5;
const ALBEDO_RANGE: f64 = 0.15;
const PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub size: (usize, usize),
    pub n_boxes: usize,
    pub depth_range: (f64, f64),
    /// `(u, v, m)`: 1-based cell of an m x m grid forced to be farthest.
    pub farthest_cell: Option<(usize, usize, usize)>,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        let (lo, hi) = self.depth_range;
        if h < 8 || w < 8 {
            return Err(Error::InvalidSpec(format!("scene {h}x{w} is smaller than 8x8")));
        }
        if !(lo > 0.0) || !(hi - lo >= MIN_STEP) {
            return Err(Error::InvalidSpec(format!(
                "depth range ({lo}, {hi}) needs min > 0 and at least {MIN_STEP} m of span"
            )));
        }
        if let Some((u, v, m)) = self.farthest_cell {
            if m == 0 || m > h || m > w || u == 0 || v == 0 || u > m || v > m {
                return Err(Error::InvalidSpec(format!("farthest cell ({u}, {v}) of m = {m}")));
            }
        }
        Ok(())
    }

    /// Deepest value any scene from this spec can hold; used for shading.
    pub fn shading_depth(&self) -> f64 {
        self.depth_range.1 + RECESS_DEPTH
    }
}

struct Rect {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl Rect {
    fn overlaps(&self, other: &Rect) -> bool {
        self.r0 < other.r1 && other.r0 < self.r1 && self.c0 < other.c1 && other.c0 < self.c1
    }
}

fn even_floor(x: usize) -> usize {
    x & !1
}

/// True when every pixel touching `rect` from outside differs from `depth` by at least [`MIN_STEP`].
fn ring_clear(map: &Array2<f64>, rect: &Rect, depth: f64) -> bool {
    let (h, w) = map.dim();
    let r_lo = rect.r0.saturating_sub(1);
    let r_hi = (rect.r1 + 1).min(h);
    let c_lo = rect.c0.saturating_sub(1);
    let c_hi = (rect.c1 + 1).min(w);
    for r in r_lo..r_hi {
        for c in c_lo..c_hi {
            let inside = r >= rect.r0 && r < rect.r1 && c >= rect.c0 && c < rect.c1;
            if !inside && (map[(r, c)] - depth).abs() < MIN_STEP {
                return false;
            }
        }
    }
    true
}

fn albedo<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let mut a = [0.0; 3];
    for v in &mut a {
        *v = rng.random_range(-ALBEDO_RANGE..=ALBEDO_RANGE);
    }
    a
}

pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SamplePair> {
    spec.validate()?;
    let (h, w) = spec.size;
    let (lo, hi) = spec.depth_range;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut depth = Array2::from_elem((h, w), hi);
    let mut shade = Array3::zeros((3, h, w));
    let bg = albedo(&mut rng);
    for c in 0..3 {
        shade.index_axis_mut(ndarray::Axis(0), c).fill(bg[c]);
    }

    let reserved = spec.farthest_cell.map(|(u, v, m)| Rect {
        r0: cell_edge(u - 1, h, m),
        r1: cell_edge(u, h, m),
        c0: cell_edge(v - 1, w, m),
        c1: cell_edge(v, w, m),
    });
    if let Some(rect) = &reserved {
        let a = albedo(&mut rng);
        for r in rect.r0..rect.r1 {
            for c in rect.c0..rect.c1 {
                depth[(r, c)] = hi + RECESS_DEPTH;
                for ch in 0..3 {
                    shade[(ch, r, c)] = a[ch];
                }
            }
        }
    }

    let near_max = hi - MIN_STEP;
    let mut depths: Vec<f64> = (0..spec.n_boxes)
        .map(|_| rng.random_range(lo..=near_max))
        .collect();
    depths.sort_by(|a, b| b.total_cmp(a));

    let side = |len: usize| {
        let min = even_floor((len / 8).max(2));
        let max = even_floor((len / 3).max(min));
        (min, max)
    };
    let (h_min, h_max) = side(h);
    let (w_min, w_max) = side(w);

    for (i, mut d) in depths.into_iter().enumerate() {
        let mut placed = None;
        for attempt in 0..PLACEMENT_TRIES {
            if attempt > 0 && attempt % 200 == 0 {
                d = rng.random_range(lo..=near_max);
            }
            let bh = even_floor(rng.random_range(h_min..=h_max));
            let bw = even_floor(rng.random_range(w_min..=w_max));
            let r0 = even_floor(rng.random_range(0..=h - bh));
            let c0 = even_floor(rng.random_range(0..=w - bw));
            let rect = Rect {
                r0,
                r1: r0 + bh,
                c0,
                c1: c0 + bw,
            };
            if reserved.as_ref().is_some_and(|res| res.overlaps(&rect)) {
                continue;
            }
            if ring_clear(&depth, &rect, d) {
                placed = Some(rect);
                break;
            }
        }
        let rect = placed.ok_or_else(|| {
            Error::InfeasibleScene(format!(
                "could not place box {} of {} with the required clearance",
                i + 1,
                spec.n_boxes
            ))
        })?;
        let a = albedo(&mut rng);
        for r in rect.r0..rect.r1 {
            for c in rect.c0..rect.c1 {
                depth[(r, c)] = d;
                for ch in 0..3 {
                    shade[(ch, r, c)] = a[ch];
                }
            }
        }
    }

    let far = spec.shading_depth();
    let image = Array3::from_shape_fn((3, h, w), |(c, r, x)| {
        (1.0 - depth[(r, x)] / far + shade[(c, r, x)]).clamp(0.0, 1.0)
    });
    Ok(SamplePair {
        image: RgbImage::new(image)?,
        depth: DepthMap::dense(depth)?,
        id: format!("synth-{:06}", spec.seed),
    })
}

/// `count` scenes with seeds `base.seed + i`.
///
/// With `pin_grid = Some(m)` each scene pins a farthest cell of the m x m grid,
/// chosen from the scene's seed.
pub fn synthetic_set(
    base: &SyntheticSceneSpec,
    count: usize,
    pin_grid: Option<usize>,
) -> Result<Vec<SamplePair>> {
    (0..count as u64)
        .map(|i| {
            let seed = base.seed.wrapping_add(i);
            let mut spec = SyntheticSceneSpec { seed, ..*base };
            if let Some(m) = pin_grid {
                let k = (seed % (m * m) as u64) as usize;
                spec.farthest_cell = Some((k / m + 1, k % m + 1, m));
            }
            generate_synthetic(&spec)
        })
        .collect()
}
