//! The assembled depth network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use bsnet_core::{DepthMap, RgbImage};
use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{stage_size, Backbone, BackboneConfig, SideOutputs};
use crate::bubf::{Bubf, BubfConfig};
use crate::dce::{Dce, DceConfig};
use crate::depth_head::{BaselineHead, Decoder, Srm, SrmConfig};
use crate::layers::Mode;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Encoder, decoder and the plain head.
    Baseline,
    /// Adds the context encoder.
    Dce,
    /// Adds boundary fusion and the stripe head.
    BubfSrm,
    /// All three modules.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Dce, Variant::BubfSrm, Variant::Full];

    pub fn uses_dce(self) -> bool {
        matches!(self, Variant::Dce | Variant::Full)
    }

    pub fn uses_bubf(self) -> bool {
        matches!(self, Variant::BubfSrm | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dce => "dce",
            Variant::BubfSrm => "bubf-srm",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (baseline, dce, bubf-srm, full)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub dce: DceConfig,
    pub bubf: BubfConfig,
    pub srm: SrmConfig,
    /// Width of the plain head's hidden convs.
    pub head_width: usize,
    /// Initial output depth in meters (sets the output bias).
    pub init_depth: f64,
}

impl NetworkConfig {
    pub fn full() -> Self {
        Self {
            variant: Variant::Full,
            backbone: BackboneConfig::full(),
            dce: DceConfig::full(),
            bubf: BubfConfig::full(),
            srm: SrmConfig::full(),
            head_width: 64,
            init_depth: 3.0,
        }
    }

    /// Desk-scale preset: every width at 1/8, basic blocks; the fusion and
    /// head widths are floored at 16 so the small model keeps some capacity.
    pub fn tiny() -> Self {
        Self {
            variant: Variant::Full,
            backbone: BackboneConfig::tiny(),
            dce: DceConfig {
                branch_channels: 64,
                out_channels: 256,
                ..DceConfig::full()
            },
            bubf: BubfConfig {
                rb_channels: 16,
                target_stride: 2,
            },
            srm: SrmConfig {
                refine_channels: 16,
                ..SrmConfig::full()
            },
            head_width: 16,
            init_depth: 3.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (full, tiny)"))),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dce.validate()?;
        self.bubf.validate()?;
        self.srm.validate()?;
        if !(self.init_depth > 0.0 && self.init_depth.is_finite()) {
            return Err(Error::Config("init_depth must be positive".into()));
        }
        if self.head_width == 0 {
            return Err(Error::Config("head_width must be positive".into()));
        }
        Ok(())
    }

    /// Output resolution for an input of `h x w`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        stage_size(h, w, self.bubf.target_stride)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every intermediate of one forward pass.
pub struct Features {
    pub sides: SideOutputs,
    /// Context-encoder output, absent when the variant skips it.
    pub context: Option<Tensor>,
    pub decoder: Tensor,
    pub bubf: Option<Tensor>,
    pub depth: Tensor,
}

enum Head {
    Plain(BaselineHead),
    Stripe(Bubf, Srm),
}

pub struct Network {
    cfg: NetworkConfig,
    store: ParamStore,
    backbone: Backbone,
    dce: Option<Dce>,
    decoder: Decoder,
    head: Head,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::Config(format!("unsupported dtype {dtype:?}")));
        }
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let backbone = Backbone::new(&root.sub("backbone"), &cfg.backbone)?;
        let c5 = backbone.channels()[3];
        let (dce, context_c) = if cfg.variant.uses_dce() {
            (Some(Dce::new(&root.sub("dce"), c5, &cfg.dce)?), cfg.dce.out_channels)
        } else {
            (None, c5)
        };
        let decoder = Decoder::new(&root.sub("decoder"), context_c)?;
        let head = if cfg.variant.uses_bubf() {
            let bubf = Bubf::new(&root.sub("bubf"), backbone.channels(), &cfg.bubf)?;
            let srm = Srm::new(
                &root.sub("srm"),
                decoder.out_channels(),
                cfg.bubf.rb_channels,
                &cfg.srm,
                cfg.init_depth,
            )?;
            Head::Stripe(bubf, srm)
        } else {
            Head::Plain(BaselineHead::new(
                &root.sub("head"),
                decoder.out_channels(),
                cfg.head_width,
                cfg.init_depth,
            )?)
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            dce,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `images` is `(N, 3, H, W)` with entries in [0, 1].
    pub fn features(&self, images: &Tensor, mode: Mode) -> Result<Features> {
        let (_, _, h, w) = images.dims4()?;
        let x = images.to_dtype(self.dtype())?.affine(1.0, -0.5)?;
        let sides = self.backbone.forward(&x, mode)?;
        let context = match &self.dce {
            Some(dce) => Some(dce.forward(&sides.x5, mode)?),
            None => None,
        };
        let target = self.cfg.output_size(h, w);
        let decoder = self.decoder.forward(context.as_ref().unwrap_or(&sides.x5), target, mode)?;
        let (bubf, depth) = match &self.head {
            Head::Plain(head) => (None, head.forward(&decoder, mode)?),
            Head::Stripe(bubf, srm) => {
                let y5 = bubf.forward(&sides, (h, w), mode)?;
                let depth = srm.forward(&decoder, &y5, mode)?;
                (Some(y5), depth)
            }
        };
        Ok(Features {
            sides,
            context,
            decoder,
            bubf,
            depth,
        })
    }

    /// Depth `(N, 1, ceil(H/2), ceil(W/2))`.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.features(images, mode)?.depth)
    }

    /// Eval-mode prediction for one image at network resolution.
    pub fn predict(&self, image: &RgbImage) -> Result<DepthMap> {
        let x = images_to_tensor(std::slice::from_ref(image), self.dtype(), self.device())?;
        let y = self.forward(&x, Mode::Eval)?;
        Ok(tensor_to_depths(&y)?.remove(0))
    }
}

/// Stacks same-sized images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::ResolutionMismatch(format!(
                "batch mixes {h}x{w} and {}x{}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.values().iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Splits an `(N, 1, H, W)` prediction into dense depth maps.
pub fn tensor_to_depths(t: &Tensor) -> Result<Vec<DepthMap>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: c });
    }
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    v.chunks(h * w)
        .take(n)
        .map(|chunk| {
            let a = Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk has h*w values");
            Ok(DepthMap::dense(a)?)
        })
        .collect()
}
