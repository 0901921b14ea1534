//! ResNet-50 feature extractor and the plain pooled classification head.
//!
//! Parameter names follow the torchvision layout (`conv1`, `bn1`,
//! `layer{1..4}.{i}.conv{1,2,3}`, `downsample.{0,1}`) so ImageNet weights
//! exported to safetensors load without renaming.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Ctx, Linear, ParamPath};

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 64;

/// Width and depth of the bottleneck backbone. `base_width = 64` with
/// `blocks = [3, 4, 6, 3]` is ResNet-50.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_width: usize,
    pub blocks: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            blocks: [3, 4, 6, 3],
        }
    }
}

impl BackboneConfig {
    pub const EXPANSION: usize = 4;

    /// Output channels of stage `i` (0-based), i.e. of C2..C5.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_width * (1 << i) * Self::EXPANSION
    }

    pub fn channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.stage_channels(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Bottleneck residual block: relu(transform(x) + skip(x)), where the skip
/// path is the identity when shapes agree and a strided 1×1 projection
/// otherwise.
pub struct Bottleneck {
    spec: ResidualBlockSpec,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    pub fn new(p: ParamPath<'_>, spec: ResidualBlockSpec) -> Result<Self> {
        let ResidualBlockSpec {
            in_channels,
            mid_channels,
            out_channels,
            stride,
        } = spec;
        let downsample = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(p.pp("downsample.0"), in_channels, out_channels, 1, stride, 0, false)?,
                BatchNorm2d::new(p.pp("downsample.1"), out_channels)?,
            ))
        } else {
            None
        };
        Ok(Self {
            spec,
            conv1: Conv2d::new(p.pp("conv1"), in_channels, mid_channels, 1, 1, 0, false)?,
            bn1: BatchNorm2d::new(p.pp("bn1"), mid_channels)?,
            conv2: Conv2d::new(p.pp("conv2"), mid_channels, mid_channels, 3, stride, 1, false)?,
            bn2: BatchNorm2d::new(p.pp("bn2"), mid_channels)?,
            conv3: Conv2d::new(p.pp("conv3"), mid_channels, out_channels, 1, 1, 0, false)?,
            bn3: BatchNorm2d::new(p.pp("bn3"), out_channels)?,
            downsample,
        })
    }

    pub fn spec(&self) -> ResidualBlockSpec {
        self.spec
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let channels = x.dims4()?.1;
        if channels != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "residual block expects {} channels, got {channels}",
                self.spec.in_channels
            )));
        }
        let t = nn::relu(&self.bn1.forward(&self.conv1.forward(x)?, ctx)?)?;
        let t = nn::relu(&self.bn2.forward(&self.conv2.forward(&t)?, ctx)?)?;
        let t = self.bn3.forward(&self.conv3.forward(&t)?, ctx)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, ctx)?,
            None => x.clone(),
        };
        nn::relu(&(t + skip)?)
    }
}

/// Bottom-up feature maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
}

impl FeatureStack {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.c2, &self.c3, &self.c4, &self.c5]
    }
}

pub struct ResNet {
    cfg: BackboneConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResNet {
    pub fn new(p: ParamPath<'_>, cfg: BackboneConfig) -> Result<Self> {
        let stem = cfg.base_width;
        let mut in_ch = stem;
        let mut stages = Vec::with_capacity(4);
        for (i, &n) in cfg.blocks.iter().enumerate() {
            let mid = cfg.base_width << i;
            let out = cfg.stage_channels(i);
            let stage_p = p.pp(format!("layer{}", i + 1));
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let spec = ResidualBlockSpec {
                    in_channels: in_ch,
                    mid_channels: mid,
                    out_channels: out,
                    stride,
                };
                blocks.push(Bottleneck::new(stage_p.pp(b), spec)?);
                in_ch = out;
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg,
            conv1: Conv2d::new(p.pp("conv1"), 3, stem, 7, 2, 3, false)?,
            bn1: BatchNorm2d::new(p.pp("bn1"), stem)?,
            stages,
        })
    }

    pub fn config(&self) -> BackboneConfig {
        self.cfg
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<FeatureStack> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {c}")));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT,
            });
        }
        let x = nn::relu(&self.bn1.forward(&self.conv1.forward(image)?, ctx)?)?;
        let mut x = nn::max_pool2d(&x, 3, 2, 1)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, ctx)?;
            }
            levels.push(x.clone());
        }
        let c5 = levels.pop().expect("four stages");
        let c4 = levels.pop().expect("four stages");
        let c3 = levels.pop().expect("four stages");
        let c2 = levels.pop().expect("four stages");
        Ok(FeatureStack { c2, c3, c4, c5 })
    }
}

/// Pooled C5, dropout during training, affine map to class logits.
pub struct PooledHead {
    fc: Linear,
    drop_rate: f64,
}

impl PooledHead {
    pub fn new(p: ParamPath<'_>, in_dim: usize, classes: usize, drop_rate: f64) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(p, in_dim, classes)?,
            drop_rate,
        })
    }

    pub fn forward(&self, features: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let pooled = nn::global_avg_pool(features)?;
        let pooled = nn::dropout(&pooled, self.drop_rate, ctx)?;
        self.fc.forward(&pooled)
    }

    pub fn linear(&self) -> &Linear {
        &self.fc
    }
}

/// The ResNet-50 baseline classifier.
pub struct BaselineNet {
    pub backbone: ResNet,
    pub head: PooledHead,
}

impl BaselineNet {
    pub fn new(p: ParamPath<'_>, cfg: BackboneConfig, classes: usize, drop_rate: f64) -> Result<Self> {
        Ok(Self {
            backbone: ResNet::new(p.pp("backbone"), cfg)?,
            head: PooledHead::new(p.pp("fc"), cfg.stage_channels(3), classes, drop_rate)?,
        })
    }

    pub fn extract_features(&self, image: &Tensor, ctx: &Ctx) -> Result<FeatureStack> {
        self.backbone.forward(image, ctx)
    }

    pub fn classify(&self, stack: &FeatureStack, ctx: &Ctx) -> Result<Tensor> {
        self.head.forward(&stack.c5, ctx)
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.classify(&self.extract_features(image, ctx)?, ctx)
    }
}
