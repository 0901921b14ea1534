//! Feature pyramid classification head.
//!
//! The top-down pathway upsamples each coarser pyramid level 2× (nearest
//! neighbour), adds the 1×1-projected bottom-up map of the same stride, and
//! smooths the sum with a 3×3 convolution. Every level is then globally
//! average-pooled and the pooled vectors feed one classifier.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureStack, ResNet};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Ctx, Linear, ParamPath};

/// How pooled pyramid levels are turned into logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpnHeadKind {
    /// Concatenate the four pooled vectors into one classifier input.
    #[default]
    Concat,
    /// One classifier per level, logits averaged.
    PerLevelMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpnConfig {
    pub backbone: BackboneConfig,
    /// Common pyramid channel width d.
    pub channels: usize,
    pub head: FpnHeadKind,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            channels: 256,
            head: FpnHeadKind::Concat,
        }
    }
}

/// P2..P5, all with `d` channels.
#[derive(Debug, Clone)]
pub struct PyramidStack {
    pub levels: [Tensor; 4],
}

/// 1×1 lateral projection of a bottom-up map plus the upsampled top-down map.
pub fn lateral_merge(lateral: &Conv2d, bottom_up: &Tensor, top_down: &Tensor) -> Result<Tensor> {
    let projected = lateral.forward(bottom_up)?;
    let upsampled = nn::upsample_nearest2x(top_down)?;
    if projected.dims() != upsampled.dims() {
        return Err(Error::ShapeMismatch(format!(
            "lateral {:?} vs upsampled top-down {:?}",
            projected.dims(),
            upsampled.dims()
        )));
    }
    Ok((projected + upsampled)?)
}

pub struct FpnHead {
    cfg: FpnConfig,
    laterals: Vec<Conv2d>,
    smooths: Vec<Conv2d>,
    classifiers: Vec<Linear>,
    drop_rate: f64,
}

impl FpnHead {
    pub fn new(p: ParamPath<'_>, cfg: FpnConfig, classes: usize) -> Result<Self> {
        let d = cfg.channels;
        let mut laterals = Vec::with_capacity(4);
        let mut smooths = Vec::with_capacity(4);
        for (i, &c) in cfg.backbone.channels().iter().enumerate() {
            laterals.push(Conv2d::new(p.pp(format!("lateral{}", i + 2)), c, d, 1, 1, 0, true)?);
            smooths.push(Conv2d::new(p.pp(format!("smooth{}", i + 2)), d, d, 3, 1, 1, true)?);
        }
        let classifiers = match cfg.head {
            FpnHeadKind::Concat => vec![Linear::new(p.pp("fc"), 4 * d, classes)?],
            FpnHeadKind::PerLevelMean => (0..4)
                .map(|i| Linear::new(p.pp(format!("fc{}", i + 2)), d, classes))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            cfg,
            laterals,
            smooths,
            classifiers,
            drop_rate: 0.0,
        })
    }

    /// Dropout on the pooled features during training.
    pub fn with_drop_rate(mut self, rate: f64) -> Self {
        self.drop_rate = rate;
        self
    }

    pub fn lateral(&self, level: usize) -> &Conv2d {
        &self.laterals[level]
    }

    pub fn smoother(&self, level: usize) -> &Conv2d {
        &self.smooths[level]
    }

    pub fn classifiers(&self) -> &[Linear] {
        &self.classifiers
    }

    /// 3×3 smoothing of a merged map (padding 1, spatial size preserved).
    pub fn smooth(&self, level: usize, merged: &Tensor) -> Result<Tensor> {
        self.smooths[level].forward(merged)
    }

    pub fn pyramid(&self, stack: &FeatureStack) -> Result<PyramidStack> {
        let c = stack.levels();
        for (i, level) in c.iter().enumerate() {
            let ch = level.dims4()?.1;
            if ch != self.cfg.backbone.stage_channels(i) {
                return Err(Error::ShapeMismatch(format!(
                    "C{} has {ch} channels, expected {}",
                    i + 2,
                    self.cfg.backbone.stage_channels(i)
                )));
            }
        }
        let mut merged = self.laterals[3].forward(c[3])?;
        let mut levels: Vec<Tensor> = vec![self.smooth(3, &merged)?];
        for k in (0..3).rev() {
            merged = lateral_merge(&self.laterals[k], c[k], &merged)?;
            levels.push(self.smooth(k, &merged)?);
        }
        levels.reverse();
        let levels: [Tensor; 4] = levels.try_into().expect("four levels");
        Ok(PyramidStack { levels })
    }

    /// Pooled level vectors concatenated, (B, 4d).
    pub fn pooled_features(&self, pyramid: &PyramidStack) -> Result<Tensor> {
        let pooled = pyramid
            .levels
            .iter()
            .map(nn::global_avg_pool)
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }

    pub fn classify(&self, stack: &FeatureStack, ctx: &Ctx) -> Result<Tensor> {
        let pyramid = self.pyramid(stack)?;
        match self.cfg.head {
            FpnHeadKind::Concat => {
                let pooled = nn::dropout(&self.pooled_features(&pyramid)?, self.drop_rate, ctx)?;
                self.classifiers[0].forward(&pooled)
            }
            FpnHeadKind::PerLevelMean => {
                let mut sum: Option<Tensor> = None;
                for (level, fc) in pyramid.levels.iter().zip(&self.classifiers) {
                    let pooled = nn::dropout(&nn::global_avg_pool(level)?, self.drop_rate, ctx)?;
                    let logits = fc.forward(&pooled)?;
                    sum = Some(match sum {
                        None => logits,
                        Some(s) => (s + logits)?,
                    });
                }
                Ok((sum.expect("four levels") / 4.0)?)
            }
        }
    }
}

pub struct FpnNet {
    pub backbone: ResNet,
    pub head: FpnHead,
}

impl FpnNet {
    pub fn new(p: ParamPath<'_>, cfg: FpnConfig, classes: usize) -> Result<Self> {
        Ok(Self {
            backbone: ResNet::new(p.pp("backbone"), cfg.backbone)?,
            head: FpnHead::new(p.pp("fpn"), cfg, classes)?,
        })
    }

    pub fn forward(&self, image: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.head.classify(&self.backbone.forward(image, ctx)?, ctx)
    }
}
