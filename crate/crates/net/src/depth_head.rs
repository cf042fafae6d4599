//! Decoder from the context feature, the stripe refinement head and the plain
//! three-conv head used by ablations without boundary fusion.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::layers::{softplus, softplus_inverse, Conv, ConvUnit, Mode, UpProjection};
use crate::params::Scope;
use crate::{Error, Result};

/// Two resolution-preserving large-kernel steps and two up-projections, each
/// halving channels; the last one lands exactly on the output size.
pub struct Decoder {
    steps: Vec<UpProjection>,
    out_channels: usize,
}

impl Decoder {
    pub fn new(s: &Scope, in_c: usize) -> Result<Self> {
        if in_c < 16 {
            return Err(Error::Config(format!("decoder input {in_c} cannot be halved four times")));
        }
        let widths = [in_c, in_c / 2, in_c / 4, in_c / 8, in_c / 16];
        let steps = (0..4)
            .map(|i| UpProjection::new(&s.sub(format!("step{}", i + 1)), widths[i], widths[i + 1], i >= 2, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            steps,
            out_channels: widths[4],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Outputs of the four steps.
    pub fn steps(&self, x: &Tensor, target: (usize, usize), mode: Mode) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(4);
        let mut y = x.clone();
        for (i, step) in self.steps.iter().enumerate() {
            y = step.forward(&y, (i == 3).then_some(target), mode)?;
            outs.push(y.clone());
        }
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor, target: (usize, usize), mode: Mode) -> Result<Tensor> {
        Ok(self.steps(x, target, mode)?.pop().expect("four steps"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmConfig {
    pub stripe_kernels: [(usize, usize); 2],
    pub refine_kernel: usize,
    pub refine_depth: usize,
    pub refine_channels: usize,
}

impl SrmConfig {
    pub fn full() -> Self {
        Self {
            stripe_kernels: [(3, 11), (11, 3)],
            refine_kernel: 5,
            refine_depth: 3,
            refine_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.stripe_kernels;
        if a != (b.1, b.0) {
            return Err(Error::Config(format!("stripe kernels {a:?} and {b:?} are not transposes")));
        }
        if a.0 % 2 == 0 || a.1 % 2 == 0 || self.refine_kernel % 2 == 0 {
            return Err(Error::Config("kernels must have odd sizes".into()));
        }
        if self.refine_depth == 0 || self.refine_channels == 0 {
            return Err(Error::Config("refine depth and width must be positive".into()));
        }
        Ok(())
    }
}

fn output_conv(s: &Scope, in_c: usize, k: usize, init_depth: f64) -> Result<Conv> {
    let conv = Conv::same(s, in_c, 1, (k, k), true)?;
    // Fan-out scaling on a single output channel gives pre-activations with a
    // std of ~10, deep in softplus' flat tail; rescale to fan-in (std 1/sqrt(fan_in)).
    let (fan_in, fan_out) = ((in_c * k * k) as f64, (k * k) as f64);
    let w = conv.weight().affine((fan_out / (2.0 * fan_in)).sqrt(), 0.0)?;
    s.assign("weight", &w)?;
    if let Some(b) = conv.bias() {
        // Start the softplus output at the expected scene depth.
        let v = b.ones_like()?.affine(softplus_inverse(init_depth), 0.0)?;
        s.assign("bias", &v)?;
    }
    Ok(conv)
}

/// Stripe refinement: concat -> (3x11 + 11x3) -> 3x3 gives F; a stack of
/// `refine_depth` convs whose last one also sees F; softplus output.
pub struct Srm {
    stripes: [Conv; 2],
    fuse: ConvUnit,
    refine: Vec<ConvUnit>,
    last: Conv,
    fused_channels: usize,
}

impl Srm {
    pub fn new(s: &Scope, decoder_c: usize, bubf_c: usize, cfg: &SrmConfig, init_depth: f64) -> Result<Self> {
        cfg.validate()?;
        let c = decoder_c + bubf_c;
        let k = cfg.refine_kernel;
        let stripes = [
            Conv::same(&s.sub("stripe_h"), c, c, cfg.stripe_kernels[0], true)?,
            Conv::same(&s.sub("stripe_v"), c, c, cfg.stripe_kernels[1], true)?,
        ];
        let fuse = ConvUnit::same(&s.sub("fuse"), c, c, 3, true, true)?;
        let mut refine = Vec::new();
        let mut prev = c;
        for i in 0..cfg.refine_depth - 1 {
            refine.push(ConvUnit::same(&s.sub(format!("refine{}", i + 1)), prev, cfg.refine_channels, k, true, true)?);
            prev = cfg.refine_channels;
        }
        // With a single refinement conv its input already is F.
        let last_in = if refine.is_empty() { c } else { prev + c };
        let last = output_conv(&s.sub(format!("refine{}", cfg.refine_depth)), last_in, k, init_depth)?;
        Ok(Self {
            stripes,
            fuse,
            refine,
            last,
            fused_channels: c,
        })
    }

    /// The fused feature F from the concatenated inputs.
    pub fn fused(&self, joined: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.stripes[0].forward(joined)?;
        let v = self.stripes[1].forward(joined)?;
        self.fuse.forward(&(h + v)?.relu()?, mode)
    }

    /// Depth from F. `skip = false` feeds zeros in place of F to the last conv.
    pub fn regress(&self, f: &Tensor, skip: bool, mode: Mode) -> Result<Tensor> {
        if self.refine.is_empty() {
            return softplus(&self.last.forward(f)?);
        }
        let mut y = f.clone();
        for unit in &self.refine {
            y = unit.forward(&y, mode)?;
        }
        let side = if skip { f.clone() } else { f.zeros_like()? };
        softplus(&self.last.forward(&Tensor::cat(&[&y, &side], 1)?)?)
    }

    pub fn join(decoder_out: &Tensor, bubf_out: &Tensor) -> Result<Tensor> {
        let (a, b) = (decoder_out.dims4()?, bubf_out.dims4()?);
        if (a.0, a.2, a.3) != (b.0, b.2, b.3) {
            return Err(Error::ResolutionMismatch(format!(
                "decoder {}x{} vs fusion {}x{}",
                a.2, a.3, b.2, b.3
            )));
        }
        Ok(Tensor::cat(&[decoder_out, bubf_out], 1)?)
    }

    pub fn forward_with(&self, decoder_out: &Tensor, bubf_out: &Tensor, skip: bool, mode: Mode) -> Result<Tensor> {
        let joined = Self::join(decoder_out, bubf_out)?;
        let c = joined.dim(1)?;
        if c != self.fused_channels {
            return Err(Error::ChannelMismatch {
                expected: self.fused_channels,
                found: c,
            });
        }
        self.regress(&self.fused(&joined, mode)?, skip, mode)
    }

    pub fn forward(&self, decoder_out: &Tensor, bubf_out: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_with(decoder_out, bubf_out, true, mode)
    }
}

/// Three 5x5 convolutions straight from the decoder output.
pub struct BaselineHead {
    convs: Vec<ConvUnit>,
    last: Conv,
}

impl BaselineHead {
    pub fn new(s: &Scope, in_c: usize, width: usize, init_depth: f64) -> Result<Self> {
        let convs = vec![
            ConvUnit::same(&s.sub("conv1"), in_c, width, 5, true, true)?,
            ConvUnit::same(&s.sub("conv2"), width, width, 5, true, true)?,
        ];
        let last = output_conv(&s.sub("conv3"), width, 5, init_depth)?;
        Ok(Self { convs, last })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for unit in &self.convs {
            y = unit.forward(&y, mode)?;
        }
        softplus(&self.last.forward(&y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
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

    fn small_srm() -> SrmConfig {
        SrmConfig {
            refine_channels: 4,
            ..SrmConfig::full()
        }
    }

    #[test]
    fn decoder_shapes() {
        let store = ParamStore::new(DType::F32, 0);
        let dec = Decoder::new(&store.root(), 32).unwrap();
        let x = random((1, 32, 7, 10), 1).to_dtype(DType::F32).unwrap();
        let steps = dec.steps(&x, (27, 40), Mode::Train).unwrap();
        let dims: Vec<Vec<usize>> = steps.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 16, 7, 10], vec![1, 8, 7, 10], vec![1, 4, 14, 20], vec![1, 2, 27, 40]]
        );
        assert_eq!(dec.out_channels(), 2);
    }

    #[test]
    fn srm_shapes_and_positivity() {
        let store = ParamStore::new(DType::F64, 0);
        let srm = Srm::new(&store.root(), 6, 4, &small_srm(), 3.0).unwrap();
        let d = random((2, 6, 13, 17), 2);
        let b = random((2, 4, 13, 17), 3);
        let y = srm.forward(&d, &b, Mode::Train).unwrap();
        assert_eq!(y.dims(), &[2, 1, 13, 17]);
        assert!(flat(&y).iter().all(|&v| v >= 0.0));
        let joined = Srm::join(&d, &b).unwrap();
        let h = srm.stripes[0].forward(&joined).unwrap();
        let v = srm.stripes[1].forward(&joined).unwrap();
        assert_eq!(h.dims(), v.dims());
        let other = random((2, 4, 12, 17), 3);
        assert!(matches!(srm.forward(&d, &other, Mode::Train), Err(Error::ResolutionMismatch(_))));
    }

    #[test]
    fn output_starts_near_the_initial_depth() {
        let store = ParamStore::new(DType::F64, 0);
        let srm = Srm::new(&store.root(), 6, 4, &small_srm(), 2.5).unwrap();
        for (_, v) in store.vars() {
            if v.dims().len() == 4 {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
        let y = srm.forward(&random((1, 6, 8, 8), 4), &random((1, 4, 8, 8), 5), Mode::Eval).unwrap();
        assert!(flat(&y).iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn skip_connection_is_live() {
        let store = ParamStore::new(DType::F64, 1);
        let srm = Srm::new(&store.root(), 6, 4, &small_srm(), 3.0).unwrap();
        let d = random((1, 6, 12, 12), 6);
        let b = random((1, 4, 12, 12), 7);
        let with = flat(&srm.forward_with(&d, &b, true, Mode::Eval).unwrap());
        let without = flat(&srm.forward_with(&d, &b, false, Mode::Eval).unwrap());
        let diff: f64 = with.iter().zip(&without).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    /// Rows and columns of the input that move output pixel (r, c).
    fn support(f: impl Fn(&Tensor) -> Vec<f64>, x: &Tensor, r: usize, c: usize) -> (usize, usize) {
        let (_, ch, h, w) = x.dims4().unwrap();
        let base = f(x)[r * w + c];
        let xv = flat(x);
        let moves = |pr: usize, pc: usize| {
            let mut v = xv.clone();
            for k in 0..ch {
                v[(k * h + pr) * w + pc] += 1e-3 * (1.0 + k as f64);
            }
            let t = Tensor::from_vec(v, x.dims4().unwrap(), &Device::Cpu).unwrap();
            (f(&t)[r * w + c] - base).abs() > 1e-13
        };
        let cols = (0..w).filter(|&pc| moves(r, pc)).collect::<Vec<_>>();
        let rows = (0..h).filter(|&pr| moves(pr, c)).collect::<Vec<_>>();
        (
            rows.last().unwrap() - rows[0] + 1,
            cols.last().unwrap() - cols[0] + 1,
        )
    }

    #[test]
    fn stripe_head_sees_farther_than_the_plain_head() {
        let store = ParamStore::new(DType::F64, 2);
        let srm = Srm::new(&store.root().sub("srm"), 6, 4, &small_srm(), 3.0).unwrap();
        let base = BaselineHead::new(&store.root().sub("base"), 10, 4, 3.0).unwrap();
        let x = random((1, 10, 33, 33), 8);
        let srm_span = support(|t| flat(&srm.regress(&srm.fused(t, Mode::Eval).unwrap(), true, Mode::Eval).unwrap()), &x, 16, 16);
        let stripe_only = support(
            |t| {
                let s = (srm.stripes[0].forward(t).unwrap() + srm.stripes[1].forward(t).unwrap()).unwrap();
                flat(&s.sum_keepdim(1).unwrap())
            },
            &x,
            16,
            16,
        );
        let base_span = support(|t| flat(&base.forward(t, Mode::Eval).unwrap()), &x, 16, 16);
        assert_eq!(stripe_only, (11, 11));
        assert!(srm_span.0 >= 11 && srm_span.1 >= 11);
        assert!(srm_span.0 > base_span.0 && srm_span.1 > base_span.1, "srm {srm_span:?} vs plain {base_span:?}");
        assert_eq!(base_span, (13, 13));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SrmConfig::full();
        cfg.stripe_kernels = [(3, 11), (11, 5)];
        assert!(cfg.validate().is_err());
        let mut cfg = SrmConfig::full();
        cfg.refine_depth = 0;
        assert!(cfg.validate().is_err());
        let store = ParamStore::new(DType::F64, 0);
        let single = SrmConfig {
            refine_depth: 1,
            ..small_srm()
        };
        let srm = Srm::new(&store.root(), 3, 2, &single, 1.0).unwrap();
        let y = srm.forward(&random((1, 3, 6, 6), 1), &random((1, 2, 6, 6), 2), Mode::Train).unwrap();
        assert_eq!(y.dims(), &[1, 1, 6, 6]);
    }
}
