//! Bottom-up fusion of the four side-outputs into one boundary feature.
//!
//! `Y2 = up(R(X2))`, `Yi = R(lR(up(R(Xi))) ++ Y(i-1))` for i = 3, 4, 5.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{stage_size, SideOutputs};
use crate::layers::{ConvUnit, Mode, UpProjection};
use crate::params::Scope;
use crate::resample::resize_bilinear;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubfConfig {
    pub rb_channels: usize,
    /// Stride of the fused features relative to the network input.
    pub target_stride: usize,
}

impl BubfConfig {
    pub fn full() -> Self {
        Self {
            rb_channels: 64,
            target_stride: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rb_channels == 0 {
            return Err(Error::Config("rb_channels must be positive".into()));
        }
        if !matches!(self.target_stride, 1 | 2) {
            return Err(Error::Config(format!("target_stride {} not in {{1, 2}}", self.target_stride)));
        }
        Ok(())
    }

    pub fn target(&self, input_h: usize, input_w: usize) -> (usize, usize) {
        stage_size(input_h, input_w, self.target_stride)
    }
}

/// 1x1 reduction followed by a two-conv residual block.
pub struct RefinementBlock {
    reduce: ConvUnit,
    conv1: ConvUnit,
    conv2: ConvUnit,
}

impl RefinementBlock {
    pub fn new(s: &Scope, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            reduce: ConvUnit::same(&s.sub("reduce"), in_c, out_c, 1, true, false)?,
            conv1: ConvUnit::same(&s.sub("conv1"), out_c, out_c, 3, true, true)?,
            conv2: ConvUnit::same(&s.sub("conv2"), out_c, out_c, 3, true, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.reduce.forward(x, mode)?;
        let r = self.conv2.forward(&self.conv1.forward(&y, mode)?, mode)?;
        Ok((r + y)?.relu()?)
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.conv().weight().dims()[1]
    }
}

pub struct Bubf {
    cfg: BubfConfig,
    side: Vec<RefinementBlock>,
    lift: Vec<UpProjection>,
    fuse: Vec<RefinementBlock>,
}

impl Bubf {
    /// `side_channels` are the channels of Res 2..5.
    pub fn new(s: &Scope, side_channels: [usize; 4], cfg: &BubfConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.rb_channels;
        let side = side_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| RefinementBlock::new(&s.sub(format!("side{}", i + 2)), ch, c))
            .collect::<Result<Vec<_>>>()?;
        let lift = (3..=5)
            .map(|i| UpProjection::new(&s.sub(format!("lift{i}")), c, c, true, true))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (3..=5)
            .map(|i| RefinementBlock::new(&s.sub(format!("fuse{i}")), 2 * c, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            side,
            lift,
            fuse,
        })
    }

    pub fn config(&self) -> &BubfConfig {
        &self.cfg
    }

    /// Side refinement block R for level 2..5.
    pub fn side_block(&self, level: usize) -> &RefinementBlock {
        &self.side[level - 2]
    }

    /// lR for level 3..5.
    pub fn lift_block(&self, level: usize) -> &UpProjection {
        &self.lift[level - 3]
    }

    /// Fusion R for level 3..5.
    pub fn fuse_block(&self, level: usize) -> &RefinementBlock {
        &self.fuse[level - 3]
    }

    fn check(&self, sides: &SideOutputs, input: (usize, usize)) -> Result<()> {
        let strides = [4, 8, 8, 8];
        for (i, (x, s)) in sides.as_array().iter().zip(strides).enumerate() {
            let (_, _, h, w) = x.dims4()?;
            let want = stage_size(input.0, input.1, s);
            if (h, w) != want {
                return Err(Error::ResolutionMismatch(format!(
                    "Res{} is {h}x{w}, expected {}x{} for a {}x{} input",
                    i + 2,
                    want.0,
                    want.1,
                    input.0,
                    input.1
                )));
            }
        }
        Ok(())
    }

    /// All fused levels `[Y2, Y3, Y4, Y5]` at the target resolution.
    pub fn levels(&self, sides: &SideOutputs, input: (usize, usize), mode: Mode) -> Result<Vec<Tensor>> {
        self.check(sides, input)?;
        let (th, tw) = self.cfg.target(input.0, input.1);
        let half = (th.div_ceil(2), tw.div_ceil(2));
        let xs = sides.as_array();
        let r2 = self.side[0].forward(xs[0], mode)?;
        let mut ys = vec![resize_bilinear(&r2, th, tw)?];
        for level in 3..=5 {
            let r = self.side_block(level).forward(xs[level - 2], mode)?;
            let up = resize_bilinear(&r, half.0, half.1)?;
            let lifted = self.lift_block(level).forward(&up, Some((th, tw)), mode)?;
            let prev = ys.last().expect("Y2 present");
            let y = self.fuse_block(level).forward(&Tensor::cat(&[&lifted, prev], 1)?, mode)?;
            ys.push(y);
        }
        Ok(ys)
    }

    pub fn forward(&self, sides: &SideOutputs, input: (usize, usize), mode: Mode) -> Result<Tensor> {
        Ok(self.levels(sides, input, mode)?.pop().expect("four levels"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    const CH: [usize; 4] = [6, 8, 10, 12];

    fn sides(input: (usize, usize), seed: u64) -> SideOutputs {
        let s4 = stage_size(input.0, input.1, 4);
        let s8 = stage_size(input.0, input.1, 8);
        SideOutputs {
            x2: random((1, CH[0], s4.0, s4.1), seed),
            x3: random((1, CH[1], s8.0, s8.1), seed + 1),
            x4: random((1, CH[2], s8.0, s8.1), seed + 2),
            x5: random((1, CH[3], s8.0, s8.1), seed + 3),
        }
    }

    fn cfg() -> BubfConfig {
        BubfConfig {
            rb_channels: 4,
            target_stride: 2,
        }
    }

    fn zero_all(store: &ParamStore) {
        for (_, v) in store.vars() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn shapes() {
        let store = ParamStore::new(DType::F64, 0);
        let bubf = Bubf::new(&store.root(), CH, &cfg()).unwrap();
        let input = (57, 70);
        let ys = bubf.levels(&sides(input, 1), input, Mode::Train).unwrap();
        for y in &ys {
            assert_eq!(y.dims(), &[1, 4, 29, 35]);
        }
        for level in 3..=5 {
            assert_eq!(bubf.fuse_block(level).in_channels(), 8);
        }
        assert_eq!(BubfConfig::full().target(228, 304), (114, 152));
    }

    #[test]
    fn mismatched_sides_are_rejected() {
        let store = ParamStore::new(DType::F64, 0);
        let bubf = Bubf::new(&store.root(), CH, &cfg()).unwrap();
        let mut s = sides((64, 64), 1);
        s.x4 = sides((80, 64), 1).x4;
        assert!(matches!(
            bubf.forward(&s, (64, 64), Mode::Train),
            Err(Error::ResolutionMismatch(_))
        ));
    }

    #[test]
    fn refinement_block_shapes_and_zero_fixed_point() {
        let store = ParamStore::new(DType::F64, 0);
        let rb = RefinementBlock::new(&store.root(), 7, 3).unwrap();
        let x = random((2, 7, 9, 11), 4);
        assert_eq!(rb.forward(&x, Mode::Train).unwrap().dims(), &[2, 3, 9, 11]);
        zero_all(&store);
        let z = Tensor::zeros((1, 7, 5, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(flat(&rb.forward(&z, Mode::Train).unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lift_block_doubles_then_fits_target() {
        let store = ParamStore::new(DType::F64, 0);
        let up = UpProjection::new(&store.root(), 4, 4, true, true).unwrap();
        let x = random((1, 4, 15, 19), 5);
        assert_eq!(up.forward(&x, Some((28, 38)), Mode::Train).unwrap().dims(), &[1, 4, 28, 38]);

        // Identity 5x5 on branch B, branch A silenced: a constant stays constant.
        let store = ParamStore::new(DType::F64, 0);
        let up = UpProjection::new(&store.root(), 4, 4, true, true).unwrap();
        zero_all(&store);
        for (name, v) in store.vars() {
            if name.ends_with("gamma") {
                v.set(&v.ones_like().unwrap()).unwrap();
            }
            if name == "b.conv.weight" {
                let mut w = vec![0f64; 4 * 4 * 25];
                for c in 0..4 {
                    w[(c * 4 + c) * 25 + 12] = 1.0;
                }
                v.set(&Tensor::from_vec(w, (4, 4, 5, 5), &Device::Cpu).unwrap()).unwrap();
            }
        }
        let c = Tensor::full(0.7f64, (1, 4, 6, 7), &Device::Cpu).unwrap();
        let y = flat(&up.forward(&c, Some((11, 13)), Mode::Eval).unwrap());
        assert!(y.iter().all(|v| (v - y[0]).abs() < 1e-12));
        assert!(y[0] > 0.0);
    }

    #[test]
    fn literal_fold_matches() {
        let store = ParamStore::new(DType::F64, 2);
        let bubf = Bubf::new(&store.root(), CH, &cfg()).unwrap();
        let input = (64, 72);
        let s = sides(input, 6);
        let got = flat(&bubf.forward(&s, input, Mode::Eval).unwrap());

        let target = (32, 36);
        let half = (16, 18);
        let r = |level: usize, x: &Tensor| bubf.side_block(level).forward(x, Mode::Eval).unwrap();
        let xs = [(2, &s.x2), (3, &s.x3), (4, &s.x4), (5, &s.x5)];
        let y2 = resize_bilinear(&r(2, &s.x2), target.0, target.1).unwrap();
        let y5 = xs[1..].iter().fold(y2, |prev, &(level, x)| {
            let up = resize_bilinear(&r(level, x), half.0, half.1).unwrap();
            let lifted = bubf.lift_block(level).forward(&up, Some(target), Mode::Eval).unwrap();
            let joined = Tensor::cat(&[&lifted, &prev], 1).unwrap();
            bubf.fuse_block(level).forward(&joined, Mode::Eval).unwrap()
        });
        assert_eq!(got, flat(&y5));
    }

    #[test]
    fn every_side_output_receives_gradient() {
        let store = ParamStore::new(DType::F64, 3);
        let bubf = Bubf::new(&store.root(), CH, &cfg()).unwrap();
        let input = (48, 40);
        let s = sides(input, 7);
        let vars: Vec<Var> = s.as_array().iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let tracked = SideOutputs {
            x2: vars[0].as_tensor().clone(),
            x3: vars[1].as_tensor().clone(),
            x4: vars[2].as_tensor().clone(),
            x5: vars[3].as_tensor().clone(),
        };
        let y = bubf.forward(&tracked, input, Mode::Train).unwrap();
        let r = random(y.dims4().unwrap(), 8);
        let grads = (y * r).unwrap().sum_all().unwrap().backward().unwrap();
        for (i, v) in vars.iter().enumerate() {
            let g = flat(grads.get(v).expect("gradient reaches side-output"));
            let norm: f64 = g.iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "Res{} receives no gradient", i + 2);
        }
    }
}
