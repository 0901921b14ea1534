//! Residual attention network.
//!
//! Each attention module runs a trunk of pre-activation residual units and
//! an hourglass mask branch over the same input, and combines them as
//! `H = (1 + M) ⊙ F`. The mask is squashed by a sigmoid so that it can only
//! amplify trunk features, never erase them.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::MIN_INPUT;
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Ctx, Linear, ParamPath};

/// Pre-activation bottleneck unit: BN-ReLU-conv ×3 plus a skip path that
/// is projected (from the pre-activated input) when the shape changes.
pub struct PreActUnit {
    in_ch: usize,
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    bn3: BatchNorm2d,
    conv3: Conv2d,
    shortcut: Option<Conv2d>,
}

impl PreActUnit {
    pub fn new(p: ParamPath<'_>, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let mid = (out_ch / 4).max(1);
        let shortcut = if in_ch != out_ch || stride != 1 {
            Some(Conv2d::new(p.pp("shortcut"), in_ch, out_ch, 1, stride, 0, false)?)
        } else {
            None
        };
        Ok(Self {
            in_ch,
            bn1: BatchNorm2d::new(p.pp("bn1"), in_ch)?,
            conv1: Conv2d::new(p.pp("conv1"), in_ch, mid, 1, 1, 0, false)?,
            bn2: BatchNorm2d::new(p.pp("bn2"), mid)?,
            conv2: Conv2d::new(p.pp("conv2"), mid, mid, 3, stride, 1, false)?,
            bn3: BatchNorm2d::new(p.pp("bn3"), mid)?,
            conv3: Conv2d::new(p.pp("conv3"), mid, out_ch, 1, 1, 0, false)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let channels = x.dims4()?.1;
        if channels != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "residual unit expects {} channels, got {channels}",
                self.in_ch
            )));
        }
        let a = nn::relu(&self.bn1.forward(x, ctx)?)?;
        let t = self.conv1.forward(&a)?;
        let t = self.conv2.forward(&nn::relu(&self.bn2.forward(&t, ctx)?)?)?;
        let t = self.conv3.forward(&nn::relu(&self.bn3.forward(&t, ctx)?)?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(&a)?,
            None => x.clone(),
        };
        Ok((t + skip)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionModuleSpec {
    /// Residual units in the trunk branch.
    pub trunk_depth: usize,
    /// Max-pooling steps on the way down the mask hourglass.
    pub mask_downsamples: usize,
    pub channels: usize,
}

/// Hourglass producing a soft mask with the trunk output's shape.
pub struct MaskBranch {
    downs: Vec<PreActUnit>,
    skips: Vec<PreActUnit>,
    ups: Vec<PreActUnit>,
    deepest: PreActUnit,
    head_bn1: BatchNorm2d,
    head_conv1: Conv2d,
    head_bn2: BatchNorm2d,
    head_conv2: Conv2d,
}

impl MaskBranch {
    fn new(p: ParamPath<'_>, spec: AttentionModuleSpec) -> Result<Self> {
        let ch = spec.channels;
        let levels = spec.mask_downsamples.max(1);
        let unit = |name: String| PreActUnit::new(p.pp(name), ch, ch, 1);
        Ok(Self {
            downs: (0..levels).map(|l| unit(format!("down{l}"))).collect::<Result<_>>()?,
            skips: (0..levels - 1).map(|l| unit(format!("skip{l}"))).collect::<Result<_>>()?,
            ups: (0..levels - 1).map(|l| unit(format!("up{l}"))).collect::<Result<_>>()?,
            deepest: unit("deepest".into())?,
            head_bn1: BatchNorm2d::new(p.pp("head.bn1"), ch)?,
            head_conv1: Conv2d::new(p.pp("head.conv1"), ch, ch, 1, 1, 0, false)?,
            head_bn2: BatchNorm2d::new(p.pp("head.bn2"), ch)?,
            head_conv2: Conv2d::new(p.pp("head.conv2"), ch, ch, 1, 1, 0, false)?,
        })
    }

    fn descend(&self, level: usize, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let pooled = nn::max_pool2d(x, 2, 2, 0)?;
        let s = self.downs[level].forward(&pooled, ctx)?;
        if level + 1 == self.downs.len() {
            return self.deepest.forward(&s, ctx);
        }
        let skip = self.skips[level].forward(&s, ctx)?;
        let inner = self.descend(level + 1, &s, ctx)?;
        let (_, _, h, w) = s.dims4()?;
        let merged = ((nn::resize_bilinear(&inner, h, w)? + &s)? + skip)?;
        self.ups[level].forward(&merged, ctx)
    }

    /// Mask for input `x`, merged with the trunk output on the way up.
    pub fn forward(&self, x: &Tensor, trunk: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::ShapeMismatch(format!("mask branch input {h}x{w} too small to pool")));
        }
        let inner = self.descend(0, x, ctx)?;
        let up = (nn::resize_bilinear(&inner, h, w)? + trunk)?;
        let t = self.head_conv1.forward(&nn::relu(&self.head_bn1.forward(&up, ctx)?)?)?;
        let t = self.head_conv2.forward(&nn::relu(&self.head_bn2.forward(&t, ctx)?)?)?;
        nn::sigmoid(&t)
    }
}

/// Intermediate tensors of one attention module.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub mask: Tensor,
    pub trunk: Tensor,
    pub output: Tensor,
}

pub struct AttentionModule {
    spec: AttentionModuleSpec,
    pre: PreActUnit,
    trunk: Vec<PreActUnit>,
    mask: MaskBranch,
}

impl AttentionModule {
    pub fn new(p: ParamPath<'_>, spec: AttentionModuleSpec) -> Result<Self> {
        let ch = spec.channels;
        Ok(Self {
            spec,
            pre: PreActUnit::new(p.pp("pre"), ch, ch, 1)?,
            trunk: (0..spec.trunk_depth.max(1))
                .map(|i| PreActUnit::new(p.pp(format!("trunk{i}")), ch, ch, 1))
                .collect::<Result<_>>()?,
            mask: MaskBranch::new(p.pp("mask"), spec)?,
        })
    }

    pub fn spec(&self) -> AttentionModuleSpec {
        self.spec
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let c = x.dims4()?.1;
        if c != self.spec.channels {
            return Err(Error::ShapeMismatch(format!(
                "attention module expects {} channels, got {c}",
                self.spec.channels
            )));
        }
        Ok(())
    }

    pub fn forward_parts(&self, x: &Tensor, ctx: &Ctx) -> Result<AttentionOutput> {
        self.check(x)?;
        let x = self.pre.forward(x, ctx)?;
        let mut trunk = x.clone();
        for unit in &self.trunk {
            trunk = unit.forward(&trunk, ctx)?;
        }
        let mask = self.mask.forward(&x, &trunk, ctx)?;
        let output = combine(&mask, &trunk)?;
        Ok(AttentionOutput { mask, trunk, output })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_parts(x, ctx)?.output)
    }

    /// Mask alone, for inspection.
    pub fn mask(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_parts(x, ctx)?.mask)
    }
}

/// Residual attention: (1 + M) ⊙ F.
pub fn combine(mask: &Tensor, trunk: &Tensor) -> Result<Tensor> {
    if mask.dims() != trunk.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs trunk {:?}",
            mask.dims(),
            trunk.dims()
        )));
    }
    Ok(((mask + 1.0)? * trunk)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RanConfig {
    pub base_width: usize,
    /// Attention modules per stage; Attention-56 uses one in each of three.
    pub modules_per_stage: [usize; 3],
    pub trunk_depth: usize,
}

impl Default for RanConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            modules_per_stage: [1, 1, 1],
            trunk_depth: 2,
        }
    }
}

impl RanConfig {
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_width * 4 * (1 << i)
    }
}

struct AttentionStage {
    entry: PreActUnit,
    modules: Vec<(AttentionModule, PreActUnit)>,
}

pub struct RanNet {
    cfg: RanConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<AttentionStage>,
    tail: Vec<PreActUnit>,
    head_bn: BatchNorm2d,
    fc: Linear,
    drop_rate: f64,
}

impl RanNet {
    pub fn new(p: ParamPath<'_>, cfg: RanConfig, classes: usize) -> Result<Self> {
        let stem = cfg.base_width;
        let mut in_ch = stem;
        let mut stages = Vec::new();
        for (i, &count) in cfg.modules_per_stage.iter().enumerate() {
            let ch = cfg.stage_channels(i);
            let sp = p.pp(format!("stage{}", i + 1));
            let entry = PreActUnit::new(sp.pp("entry"), in_ch, ch, if i == 0 { 1 } else { 2 })?;
            let spec = AttentionModuleSpec {
                trunk_depth: cfg.trunk_depth,
                mask_downsamples: 3 - i,
                channels: ch,
            };
            let modules = (0..count)
                .map(|m| {
                    Ok((
                        AttentionModule::new(sp.pp(format!("attention{m}")), spec)?,
                        PreActUnit::new(sp.pp(format!("post{m}")), ch, ch, 1)?,
                    ))
                })
                .collect::<Result<_>>()?;
            stages.push(AttentionStage { entry, modules });
            in_ch = ch;
        }
        let last = cfg.stage_channels(3);
        let tail = vec![
            PreActUnit::new(p.pp("tail0"), in_ch, last, 2)?,
            PreActUnit::new(p.pp("tail1"), last, last, 1)?,
            PreActUnit::new(p.pp("tail2"), last, last, 1)?,
        ];
        Ok(Self {
            cfg,
            conv1: Conv2d::new(p.pp("conv1"), 3, stem, 7, 2, 3, false)?,
            bn1: BatchNorm2d::new(p.pp("bn1"), stem)?,
            stages,
            tail,
            head_bn: BatchNorm2d::new(p.pp("head_bn"), last)?,
            fc: Linear::new(p.pp("fc"), last, classes)?,
            drop_rate: 0.0,
        })
    }

    /// Dropout on the pooled features during training.
    pub fn with_drop_rate(mut self, rate: f64) -> Self {
        self.drop_rate = rate;
        self
    }

    pub fn config(&self) -> RanConfig {
        self.cfg
    }

    /// Features of the last residual unit, plus every attention module's
    /// intermediates when `probes` is given.
    pub fn features(
        &self,
        image: &Tensor,
        ctx: &Ctx,
        mut probes: Option<&mut Vec<AttentionOutput>>,
    ) -> Result<Tensor> {
        let (_, _, h, w) = image.dims4()?;
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: MIN_INPUT,
            });
        }
        let x = nn::relu(&self.bn1.forward(&self.conv1.forward(image)?, ctx)?)?;
        let mut x = nn::max_pool2d(&x, 3, 2, 1)?;
        for stage in &self.stages {
            x = stage.entry.forward(&x, ctx)?;
            for (module, post) in &stage.modules {
                let parts = module.forward_parts(&x, ctx)?;
                x = post.forward(&parts.output, ctx)?;
                if let Some(list) = probes.as_deref_mut() {
                    list.push(parts);
                }
            }
        }
        for unit in &self.tail {
            x = unit.forward(&x, ctx)?;
        }
        Ok(x)
    }

    pub fn head(&self, features: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = nn::relu(&self.head_bn.forward(features, ctx)?)?;
        let pooled = nn::dropout(&nn::global_avg_pool(&x)?, self.drop_rate, ctx)?;
        self.fc.forward(&pooled)
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.head(&self.features(image, ctx, None)?, ctx)
    }
}
