//! The four classifiers behind one interface, and their checkpoints.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BaselineNet};
use crate::data_io::LabelSpace;
use crate::error::{Error, Result};
use crate::fpn::{FpnConfig, FpnHeadKind, FpnNet};
use crate::mmal::{AppmConfig, BranchWeights, MmalConfig, MmalNet};
use crate::nn::{self, Ctx, ParamStore};
use crate::ran::{RanConfig, RanNet};

pub const CHECKPOINT_FORMAT: &str = "pestvision-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Resnet50,
    Ran,
    Fpn,
    Mmal,
}

impl ModelTag {
    pub const ALL: [ModelTag; 4] = [ModelTag::Resnet50, ModelTag::Ran, ModelTag::Fpn, ModelTag::Mmal];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelTag::Resnet50 => "resnet50",
            ModelTag::Ran => "ran",
            ModelTag::Fpn => "fpn",
            ModelTag::Mmal => "mmal",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}', expected resnet50|ran|fpn|mmal")))
    }
}

/// Architecture knobs shared by all model tags; each tag reads the ones it
/// needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub base_width: usize,
    pub blocks: [usize; 4],
    pub fpn_channels: usize,
    pub fpn_head: FpnHeadKind,
    pub ran_modules: [usize; 3],
    pub ran_trunk_depth: usize,
    pub appm_windows: Vec<(usize, usize)>,
    pub appm_top_k: Vec<usize>,
    pub appm_nms_iou: f64,
    pub part_size: usize,
    pub mmal_parts_at_test: bool,
    pub loss_weight_raw: f64,
    pub loss_weight_object: f64,
    pub loss_weight_parts: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let appm = AppmConfig::default();
        let weights = BranchWeights::default();
        let ran = RanConfig::default();
        let backbone = BackboneConfig::default();
        Self {
            base_width: backbone.base_width,
            blocks: backbone.blocks,
            fpn_channels: FpnConfig::default().channels,
            fpn_head: FpnHeadKind::Concat,
            ran_modules: ran.modules_per_stage,
            ran_trunk_depth: ran.trunk_depth,
            appm_windows: appm.windows,
            appm_top_k: appm.top_k,
            appm_nms_iou: appm.nms_iou,
            part_size: MmalConfig::default().part_size,
            mmal_parts_at_test: false,
            loss_weight_raw: weights.raw,
            loss_weight_object: weights.object,
            loss_weight_parts: weights.parts,
        }
    }
}

impl ArchConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            base_width: self.base_width,
            blocks: self.blocks,
        }
    }

    pub fn fpn(&self) -> FpnConfig {
        FpnConfig {
            backbone: self.backbone(),
            channels: self.fpn_channels,
            head: self.fpn_head,
        }
    }

    pub fn ran(&self) -> RanConfig {
        RanConfig {
            base_width: self.base_width,
            modules_per_stage: self.ran_modules,
            trunk_depth: self.ran_trunk_depth,
        }
    }

    pub fn mmal(&self) -> MmalConfig {
        MmalConfig {
            backbone: self.backbone(),
            appm: AppmConfig {
                windows: self.appm_windows.clone(),
                top_k: self.appm_top_k.clone(),
                nms_iou: self.appm_nms_iou,
            },
            part_size: self.part_size,
            parts_at_test: self.mmal_parts_at_test,
        }
    }

    pub fn branch_weights(&self) -> BranchWeights {
        BranchWeights {
            raw: self.loss_weight_raw,
            object: self.loss_weight_object,
            parts: self.loss_weight_parts,
        }
    }
}

pub enum Network {
    Resnet50(BaselineNet),
    Ran(RanNet),
    Fpn(FpnNet),
    Mmal(MmalNet),
}

/// A network together with the parameter store that owns its weights.
pub struct Model {
    pub tag: ModelTag,
    pub arch: ArchConfig,
    pub classes: usize,
    pub drop_rate: f64,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn build(tag: ModelTag, arch: &ArchConfig, classes: usize, drop_rate: f64, seed: u64, dtype: DType) -> Result<Self> {
        let params = ParamStore::new(seed, dtype);
        let p = params.root();
        let net = match tag {
            ModelTag::Resnet50 => Network::Resnet50(BaselineNet::new(p, arch.backbone(), classes, drop_rate)?),
            ModelTag::Ran => Network::Ran(RanNet::new(p, arch.ran(), classes)?.with_drop_rate(drop_rate)),
            ModelTag::Fpn => {
                let mut net = FpnNet::new(p, arch.fpn(), classes)?;
                net.head = net.head.with_drop_rate(drop_rate);
                Network::Fpn(net)
            }
            ModelTag::Mmal => Network::Mmal(MmalNet::new(p, arch.mmal(), classes)?.with_drop_rate(drop_rate)),
        };
        Ok(Self {
            tag,
            arch: arch.clone(),
            classes,
            drop_rate,
            params,
            net,
        })
    }

    /// Training loss and the logits used for training accuracy.
    pub fn loss(&self, images: &Tensor, labels: &[usize], ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        if let Network::Mmal(net) = &self.net {
            return net.loss(images, labels, self.arch.branch_weights(), ctx);
        }
        let logits = self.logits(images, ctx)?;
        Ok((nn::cross_entropy(&logits, labels)?, logits))
    }

    /// Prediction logits (for MMAL, the combined test-time logits).
    pub fn logits(&self, images: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match &self.net {
            Network::Resnet50(net) => net.forward(images, ctx),
            Network::Ran(net) => net.forward(images, ctx),
            Network::Fpn(net) => net.forward(images, ctx),
            Network::Mmal(net) => net.predict_logits(images, ctx),
        }
    }

    /// Eval-mode class probabilities, (B, classes).
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        nn::softmax(&self.logits(images, &Ctx::eval())?.detach())
    }

    /// Eval-mode forward split at the last feature-extractor block. The
    /// returned activation is a fresh leaf variable, so gradients of the
    /// returned logits with respect to it can be read after `backward`.
    pub fn activation_and_logits(&self, images: &Tensor) -> Result<(Var, Tensor)> {
        let ctx = Ctx::eval();
        match &self.net {
            Network::Resnet50(net) => {
                let stack = net.extract_features(images, &ctx)?;
                let act = Var::from_tensor(&stack.c5.detach())?;
                let logits = net.head.forward(act.as_tensor(), &ctx)?;
                Ok((act, logits))
            }
            Network::Ran(net) => {
                let feats = net.features(images, &ctx, None)?;
                let act = Var::from_tensor(&feats.detach())?;
                let logits = net.head(act.as_tensor(), &ctx)?;
                Ok((act, logits))
            }
            Network::Fpn(net) => {
                let mut stack = net.backbone.forward(images, &ctx)?;
                for t in [&mut stack.c2, &mut stack.c3, &mut stack.c4] {
                    *t = t.detach();
                }
                let act = Var::from_tensor(&stack.c5.detach())?;
                stack.c5 = act.as_tensor().clone();
                let logits = net.head.classify(&stack, &ctx)?;
                Ok((act, logits))
            }
            Network::Mmal(net) => {
                let stack = net.backbone.forward(images, &ctx)?;
                let act = Var::from_tensor(&stack.c5.detach())?;
                let logits = net.classify(act.as_tensor(), &ctx)?;
                Ok((act, logits))
            }
        }
    }

    /// Name of the layer [`Model::activation_and_logits`] splits at.
    pub fn activation_layer(&self) -> &'static str {
        match self.tag {
            ModelTag::Ran => "tail2",
            ModelTag::Mmal => "backbone.layer4 (raw branch)",
            _ => "backbone.layer4",
        }
    }

    /// Writes weights, running statistics and metadata to a safetensors file.
    pub fn save(&self, path: &Path, labels: &LabelSpace, extra: &[(&str, String)]) -> Result<()> {
        if labels.count() != self.classes {
            return Err(Error::LabelSpaceMismatch(format!(
                "model has {} classes, label space {}",
                self.classes,
                labels.count()
            )));
        }
        let json = |e: serde_json::Error| Error::Config(e.to_string());
        let mut meta: HashMap<String, String> = HashMap::new();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.into());
        meta.insert("model".into(), self.tag.to_string());
        meta.insert("labels".into(), serde_json::to_string(labels.names()).map_err(json)?);
        meta.insert("arch".into(), serde_json::to_string(&self.arch).map_err(json)?);
        meta.insert("drop_rate".into(), self.drop_rate.to_string());
        for (k, v) in extra {
            meta.insert((*k).to_string(), v.clone());
        }
        self.params.save(path, meta)
    }

    /// Rebuilds a model from a checkpoint. Returns the model, its label space
    /// and the full metadata map.
    pub fn load(path: &Path) -> Result<(Self, LabelSpace, HashMap<String, String>)> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let meta = Self::read_metadata(path)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata '{k}'")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(bad("not a pestvision checkpoint".into()));
        }
        if field("version")? != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", field("version")?)));
        }
        let tag: ModelTag = field("model")?.parse()?;
        let names: Vec<String> = serde_json::from_str(&field("labels")?).map_err(|e| bad(e.to_string()))?;
        let labels = LabelSpace::new(names)?;
        let arch: ArchConfig = serde_json::from_str(&field("arch")?).map_err(|e| bad(e.to_string()))?;
        let drop_rate: f64 = field("drop_rate")?.parse().map_err(|_| bad("bad drop_rate".into()))?;
        let model = Self::build(tag, &arch, labels.count(), drop_rate, 0, DType::F32)?;
        model.params.load(path, true, |n| Some(n.to_string()))?;
        Ok((model, labels, meta))
    }

    /// Checkpoint metadata without building the model.
    pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(header.metadata().clone().unwrap_or_default())
    }

    /// Copies ImageNet backbone weights stored under torchvision names
    /// (`conv1.weight`, `layer1.0.bn1.running_mean`, ...) into the backbone.
    /// Classifier weights in the file are ignored. Returns the tensor count.
    pub fn load_backbone_weights(&self, path: &Path) -> Result<usize> {
        if self.tag == ModelTag::Ran {
            return Err(Error::UnsupportedLayer(
                "the attention network has no ResNet backbone to initialize".into(),
            ));
        }
        let (n, _) = self.params.load(path, false, |name| {
            (!name.starts_with("fc.")).then(|| format!("backbone.{name}"))
        })?;
        Ok(n)
    }
}
