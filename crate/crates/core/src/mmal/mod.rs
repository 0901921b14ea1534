//! Multi-branch attention-localizing network.
//!
//! One backbone and one classifier are shared by three branches: the raw
//! image, the localized object crop, and a set of part crops taken from the
//! object crop. Localization needs no box labels; it reads the backbone's own
//! activation maps.

mod localize;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureStack, ResNet};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, Linear, ParamPath};

pub use localize::{
    aolm_locate, appm_propose, largest_component, window_scores, ActivationMap, AolmResult, AppmConfig,
    BoundingBox, Component, PartProposal,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmalConfig {
    pub backbone: BackboneConfig,
    pub appm: AppmConfig,
    /// Side length every part crop is resized to.
    pub part_size: usize,
    /// Average the part logits into the test-time prediction as well.
    pub parts_at_test: bool,
}

impl Default for MmalConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            appm: AppmConfig::default(),
            part_size: 224,
            parts_at_test: false,
        }
    }
}

/// Relative weights of the three branch losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub raw: f64,
    pub object: f64,
    pub parts: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            raw: 1.0,
            object: 1.0,
            parts: 1.0,
        }
    }
}

pub struct MmalOutputs {
    pub raw_logits: Tensor,
    pub object_logits: Tensor,
    /// (B·N, classes), sample-major; present when parts were run.
    pub part_logits: Option<Tensor>,
    pub objects: Vec<AolmResult>,
    pub parts: Vec<Vec<PartProposal>>,
}

/// Crops `bbox` out of one (C, H, W) image and resizes it bilinearly.
pub fn crop_resize(image: &Tensor, bbox: &BoundingBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if !bbox.is_valid_within(h, w) {
        return Err(Error::ShapeMismatch(format!("box {bbox:?} outside a {h}x{w} image")));
    }
    let crop = image
        .narrow(1, bbox.row0, bbox.height())?
        .narrow(2, bbox.col0, bbox.width())?
        .unsqueeze(0)?;
    Ok(nn::resize_bilinear(&crop, out_h, out_w)?.squeeze(0)?)
}

pub struct MmalNet {
    pub backbone: ResNet,
    pub fc: Linear,
    cfg: MmalConfig,
    drop_rate: f64,
}

impl MmalNet {
    pub fn new(p: ParamPath<'_>, cfg: MmalConfig, classes: usize) -> Result<Self> {
        Ok(Self {
            backbone: ResNet::new(p.pp("backbone"), cfg.backbone)?,
            fc: Linear::new(p.pp("fc"), cfg.backbone.stage_channels(3), classes)?,
            cfg,
            drop_rate: 0.0,
        })
    }

    /// Dropout on the pooled features during training.
    pub fn with_drop_rate(mut self, rate: f64) -> Self {
        self.drop_rate = rate;
        self
    }

    pub fn config(&self) -> &MmalConfig {
        &self.cfg
    }

    /// Shared classifier on pooled C5.
    pub fn classify(&self, c5: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.fc.forward(&nn::dropout(&nn::global_avg_pool(c5)?, self.drop_rate, ctx)?)
    }

    /// Object boxes for every image of a batch from its raw-branch features.
    pub fn locate(&self, stack: &FeatureStack, height: usize, width: usize) -> Result<Vec<AolmResult>> {
        let b = stack.c5.dims4()?.0;
        (0..b)
            .map(|i| {
                let fine = ActivationMap::from_features(&stack.c4.get(i)?)?;
                let coarse = ActivationMap::from_features(&stack.c5.get(i)?)?;
                Ok(aolm_locate(&fine, &coarse, height, width))
            })
            .collect()
    }

    /// Runs the branches. Parts are computed when `with_parts` is set.
    pub fn forward_branches(&self, images: &Tensor, ctx: &Ctx, with_parts: bool) -> Result<MmalOutputs> {
        let (b, _, h, w) = images.dims4()?;
        let raw = self.backbone.forward(images, ctx)?;
        let raw_logits = self.classify(&raw.c5, ctx)?;
        let objects = self.locate(&raw, h, w)?;

        let crops = (0..b)
            .map(|i| crop_resize(&images.get(i)?, &objects[i].bbox, h, w))
            .collect::<Result<Vec<_>>>()?;
        let object_images = Tensor::stack(&crops, 0)?.detach();
        let object = self.backbone.forward(&object_images, ctx)?;
        let object_logits = self.classify(&object.c5, ctx)?;

        let mut parts = Vec::new();
        let mut part_logits = None;
        if with_parts {
            let s = self.cfg.part_size;
            let mut part_images = Vec::with_capacity(b * self.cfg.appm.parts_per_image());
            for i in 0..b {
                let map = ActivationMap::from_features(&object.c5.get(i)?)?;
                let props = appm_propose(&map, &self.cfg.appm, h, w)?;
                let obj = object_images.get(i)?;
                for prop in &props {
                    part_images.push(crop_resize(&obj, &prop.bbox, s, s)?);
                }
                parts.push(props);
            }
            if !part_images.is_empty() {
                let batch = Tensor::stack(&part_images, 0)?.detach();
                let stack = self.backbone.forward(&batch, ctx)?;
                part_logits = Some(self.classify(&stack.c5, ctx)?);
            }
        }
        Ok(MmalOutputs {
            raw_logits,
            object_logits,
            part_logits,
            objects,
            parts,
        })
    }

    /// Training loss: weighted sum of the raw, object and mean part
    /// cross-entropies. Returns the loss and the raw-branch logits.
    pub fn loss(&self, images: &Tensor, labels: &[usize], weights: BranchWeights, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let out = self.forward_branches(images, ctx, true)?;
        let mut loss = ((nn::cross_entropy(&out.raw_logits, labels)? * weights.raw)?
            + (nn::cross_entropy(&out.object_logits, labels)? * weights.object)?)?;
        if let Some(parts) = &out.part_logits {
            let repeated: Vec<usize> = out
                .parts
                .iter()
                .zip(labels)
                .flat_map(|(p, &l)| std::iter::repeat(l).take(p.len()))
                .collect();
            loss = (loss + (nn::cross_entropy(parts, &repeated)? * weights.parts)?)?;
        }
        Ok((loss, out.raw_logits))
    }

    /// Test-time logits: mean of raw and object logits, with the mean part
    /// logits as a third term when configured.
    pub fn predict_logits(&self, images: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let out = self.forward_branches(images, ctx, self.cfg.parts_at_test)?;
        combine_logits(&out)
    }
}

/// Averages the branch logits of [`MmalOutputs`] per sample.
pub fn combine_logits(out: &MmalOutputs) -> Result<Tensor> {
    let mut sum = (&out.raw_logits + &out.object_logits)?;
    let mut terms = 2.0;
    if let Some(parts) = &out.part_logits {
        let (b, c) = out.raw_logits.dims2()?;
        let n = parts.dims2()?.0 / b;
        let per_sample = parts.reshape((b, n, c))?.mean(1)?;
        sum = (sum + per_sample)?;
        terms += 1.0;
    }
    Ok((sum / terms)?)
}

/// Class probabilities from the combined logits.
pub fn mmal_predict(out: &MmalOutputs) -> Result<Tensor> {
    nn::softmax(&combine_logits(out)?)
}
