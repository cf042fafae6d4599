//! Residual encoder. Stages 4 and 5 trade striding for dilation, so the last
//! three side-outputs share stride 8.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::kernels::{max_pool, ConvGeometry, MaxPool};
use crate::layers::{ConvUnit, Mode};
use crate::params::Scope;
use crate::{Error, Result};

pub const MIN_INPUT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// 1x1 -> 3x3 -> 1x1 with a 4x expansion.
    Bottleneck,
    /// Two 3x3 convolutions.
    Basic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of Res 2..5 before width scaling.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub stem_channels: usize,
    pub width_scale: f64,
    pub block: BlockKind,
    pub stage4_dilation: usize,
    pub stage5_dilation: usize,
}

impl BackboneConfig {
    /// ResNet-50 layout.
    pub fn full() -> Self {
        Self {
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
            stem_channels: 64,
            width_scale: 1.0,
            block: BlockKind::Bottleneck,
            stage4_dilation: 2,
            stage5_dilation: 4,
        }
    }

    pub fn tiny() -> Self {
        Self {
            blocks_per_stage: [2, 2, 2, 2],
            width_scale: 0.125,
            block: BlockKind::Basic,
            ..Self::full()
        }
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Channel counts of Res 2..5 after scaling.
    pub fn channels(&self) -> [usize; 4] {
        self.stage_channels.map(|c| self.scaled(c))
    }

    pub fn stem(&self) -> usize {
        self.scaled(self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Config("width scale must be positive".into()));
        }
        let c = self.channels();
        if !c.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config(format!("stage channels {c:?} must be strictly increasing")));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.block == BlockKind::Bottleneck && c.iter().any(|&x| x % 4 != 0) {
            return Err(Error::Config("bottleneck stages need channels divisible by 4".into()));
        }
        if self.stage4_dilation == 0 || self.stage5_dilation == 0 {
            return Err(Error::Config("dilations must be >= 1".into()));
        }
        Ok(())
    }
}

struct Block {
    body: Vec<ConvUnit>,
    shortcut: Option<ConvUnit>,
}

impl Block {
    fn new(s: &Scope, kind: BlockKind, in_c: usize, out_c: usize, stride: usize, dilation: usize) -> Result<Self> {
        let k3 = ConvGeometry::strided((3, 3), stride, dilation);
        let body = match kind {
            BlockKind::Basic => vec![
                ConvUnit::new(&s.sub("conv1"), in_c, out_c, (3, 3), k3, true, true)?,
                ConvUnit::new(&s.sub("conv2"), out_c, out_c, (3, 3), ConvGeometry::same((3, 3), dilation), true, false)?,
            ],
            BlockKind::Bottleneck => {
                let mid = out_c / 4;
                vec![
                    ConvUnit::same(&s.sub("conv1"), in_c, mid, 1, true, true)?,
                    ConvUnit::new(&s.sub("conv2"), mid, mid, (3, 3), k3, true, true)?,
                    ConvUnit::same(&s.sub("conv3"), mid, out_c, 1, true, false)?,
                ]
            }
        };
        let shortcut = if in_c != out_c || stride != 1 {
            Some(ConvUnit::new(
                &s.sub("down"),
                in_c,
                out_c,
                (1, 1),
                ConvGeometry::strided((1, 1), stride, 1),
                true,
                false,
            )?)
        } else {
            None
        };
        Ok(Self { body, shortcut })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for unit in &self.body {
            y = unit.forward(&y, mode)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// The four side-outputs Res 2..5.
#[derive(Clone)]
pub struct SideOutputs {
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
    pub x5: Tensor,
}

impl SideOutputs {
    pub fn as_array(&self) -> [&Tensor; 4] {
        [&self.x2, &self.x3, &self.x4, &self.x5]
    }
}

pub struct Backbone {
    stem: ConvUnit,
    stages: Vec<Vec<Block>>,
    channels: [usize; 4],
}

impl Backbone {
    pub fn new(s: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.channels();
        let stem = ConvUnit::new(
            &s.sub("stem"),
            3,
            cfg.stem(),
            (7, 7),
            ConvGeometry::strided((7, 7), 2, 1),
            true,
            true,
        )?;
        let strides = [1, 2, 1, 1];
        let dilations = [1, 1, cfg.stage4_dilation, cfg.stage5_dilation];
        let mut in_c = cfg.stem();
        let mut stages = Vec::new();
        for i in 0..4 {
            let st = s.sub(format!("res{}", i + 2));
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage[i] {
                let stride = if b == 0 { strides[i] } else { 1 };
                blocks.push(Block::new(&st.sub(b), cfg.block, in_c, channels[i], stride, dilations[i])?);
                in_c = channels[i];
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages, channels })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<SideOutputs> {
        let (_, c, h, w) = image.dims4()?;
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT,
            });
        }
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, found: c });
        }
        let x = self.stem.forward(image, mode)?;
        let mut x = max_pool(
            &x,
            MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        )?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
            outs.push(x.clone());
        }
        let [x2, x3, x4, x5]: [Tensor; 4] = outs.try_into().expect("four stages");
        Ok(SideOutputs { x2, x3, x4, x5 })
    }
}

/// Spatial size of a side-output with the given stride.
pub fn stage_size(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-0.5..0.5)).collect();
        Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn tiny_channels_and_strides() {
        let cfg = BackboneConfig::tiny();
        assert_eq!(cfg.channels(), [32, 64, 128, 256]);
        assert_eq!(BackboneConfig::full().channels(), [256, 512, 1024, 2048]);
        let store = ParamStore::new(DType::F32, 0);
        let net = Backbone::new(&store.root(), &cfg).unwrap();
        for (h, w) in [(64, 64), (45, 71), (32, 33)] {
            let out = net.forward(&image(h, w, 1, DType::F32), Mode::Train).unwrap();
            let strides = [4, 8, 8, 8];
            for (i, x) in out.as_array().iter().enumerate() {
                let (_, c, oh, ow) = x.dims4().unwrap();
                assert_eq!(c, cfg.channels()[i]);
                assert_eq!((oh, ow), stage_size(h, w, strides[i]), "stage {} at {h}x{w}", i + 2);
            }
        }
    }

    #[test]
    fn rejects_small_inputs_and_bad_configs() {
        let store = ParamStore::new(DType::F32, 0);
        let net = Backbone::new(&store.root(), &BackboneConfig::tiny()).unwrap();
        assert!(matches!(
            net.forward(&image(31, 64, 1, DType::F32), Mode::Eval),
            Err(Error::InputTooSmall { height: 31, .. })
        ));
        let mut cfg = BackboneConfig::tiny();
        cfg.stage_channels = [64, 64, 128, 256];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inference_is_bitwise_repeatable() {
        let store = ParamStore::new(DType::F32, 2);
        let net = Backbone::new(&store.root(), &BackboneConfig::tiny()).unwrap();
        let x = image(40, 48, 3, DType::F32);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap();
        for (p, q) in a.as_array().iter().zip(b.as_array()) {
            assert_eq!(flat(p), flat(q));
        }
    }

    #[test]
    fn deeper_stage_sees_a_wider_support() {
        // Footprint of a single-pixel perturbation, measured in input pixels.
        let store = ParamStore::new(DType::F64, 4);
        let net = Backbone::new(&store.root(), &BackboneConfig::tiny()).unwrap();
        let (h, w) = (64, 64);
        let x = image(h, w, 5, DType::F64);
        let base = net.forward(&x, Mode::Eval).unwrap();
        let mut v = flat(&x);
        v[32 * w + 32] += 1e-3;
        let xp = Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap();
        let pert = net.forward(&xp, Mode::Eval).unwrap();
        let footprint = |a: &Tensor, b: &Tensor, stride: usize| {
            let (_, c, fh, fw) = a.dims4().unwrap();
            let (a, b) = (flat(a), flat(b));
            let mut touched = 0;
            for p in 0..fh * fw {
                if (0..c).any(|k| (a[k * fh * fw + p] - b[k * fh * fw + p]).abs() > 1e-12) {
                    touched += 1;
                }
            }
            touched * stride * stride
        };
        let s2 = footprint(&base.x2, &pert.x2, 4);
        let s5 = footprint(&base.x5, &pert.x5, 8);
        assert!(s2 > 0);
        assert!(s5 >= s2, "res5 footprint {s5} < res2 footprint {s2}");
    }
}
