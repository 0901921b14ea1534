mod common;

use candle_core::{DType, IndexOp, Tensor};
use pestvision::backbone::{BackboneConfig, Bottleneck, ResNet, ResidualBlockSpec};
use pestvision::fpn::{FpnConfig, FpnHead, FpnHeadKind};
use pestvision::mmal::{crop_resize, BoundingBox};
use pestvision::model::{ArchConfig, Model, ModelTag, Network};
use pestvision::nn::{Ctx, ParamStore};
use pestvision::ran::{combine, AttentionModule, AttentionModuleSpec};

fn zero_params(store: &ParamStore, suffixes: &[&str]) -> usize {
    let mut n = 0;
    for (name, var, _) in store.entries() {
        if suffixes.iter().any(|s| name.ends_with(s)) {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            n += 1;
        }
    }
    n
}

#[test]
fn backbone_strides_at_reduced_width() {
    let store = ParamStore::new(1, DType::F32);
    let cfg = BackboneConfig {
        base_width: 4,
        blocks: [1, 1, 1, 1],
    };
    let net = ResNet::new(store.root(), cfg).unwrap();
    let x = common::rand_tensor(&[2, 3, 64, 96], 2, DType::F32);
    let stack = net.forward(&x, &Ctx::eval()).unwrap();
    for (i, level) in stack.levels().iter().enumerate() {
        let s = [4, 8, 16, 32][i];
        assert_eq!(level.dims(), [2, cfg.stage_channels(i), 64 / s, 96 / s]);
    }
    assert_eq!(cfg.channels(), [16, 32, 64, 128]);
}

#[test]
fn residual_block_is_relu_of_input_when_transform_zeroed() {
    let store = ParamStore::new(3, DType::F64);
    let spec = ResidualBlockSpec {
        in_channels: 8,
        mid_channels: 2,
        out_channels: 8,
        stride: 1,
    };
    let block = Bottleneck::new(store.root().pp("b"), spec).unwrap();
    assert_eq!(zero_params(&store, &["bn3.weight", "bn3.bias"]), 2);
    let x = common::rand_tensor(&[2, 8, 5, 5], 4, DType::F64);
    for ctx in [Ctx::eval(), Ctx::train(0)] {
        let y = block.forward(&x, &ctx).unwrap();
        assert_eq!(common::max_abs_diff(&y, &x.relu().unwrap()), 0.0);
    }
}

#[test]
fn residual_block_rejects_wrong_channels() {
    let store = ParamStore::new(3, DType::F32);
    let spec = ResidualBlockSpec {
        in_channels: 8,
        mid_channels: 2,
        out_channels: 8,
        stride: 1,
    };
    let block = Bottleneck::new(store.root(), spec).unwrap();
    let x = common::rand_tensor(&[1, 4, 5, 5], 4, DType::F32);
    assert!(block.forward(&x, &Ctx::eval()).is_err());
}

#[test]
fn constant_mask_scales_trunk() {
    let store = ParamStore::new(5, DType::F64);
    let spec = AttentionModuleSpec {
        trunk_depth: 2,
        mask_downsamples: 2,
        channels: 4,
    };
    let module = AttentionModule::new(store.root(), spec).unwrap();
    // a zero final projection pins the mask at sigmoid(0)
    assert_eq!(zero_params(&store, &["head.conv2.weight"]), 1);
    let x = common::rand_tensor(&[2, 4, 8, 8], 6, DType::F64);
    let parts = module.forward_parts(&x, &Ctx::eval()).unwrap();
    assert!(common::to_vec(&parts.mask).iter().all(|&m| m == 0.5));
    let scaled = (&parts.trunk * 1.5).unwrap();
    assert!(common::max_abs_diff(&parts.output, &scaled) < 1e-15);
}

#[test]
fn zero_mask_is_identity_on_trunk() {
    let trunk = common::rand_tensor(&[1, 3, 4, 4], 7, DType::F32);
    let out = combine(&trunk.zeros_like().unwrap(), &trunk).unwrap();
    assert_eq!(common::max_abs_diff(&out, &trunk), 0.0);
    let wrong = Tensor::zeros((1, 3, 4, 5), DType::F32, &candle_core::Device::Cpu).unwrap();
    assert!(combine(&wrong, &trunk).is_err());
}

// direct-loop reference for the top-down pathway

struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

fn conv(x: &Map, weight: &Tensor, bias: &Tensor, k: usize) -> Map {
    let wv = common::to_vec(weight);
    let bv = common::to_vec(bias);
    let oc = bv.len();
    let pad = k / 2;
    let mut v = vec![0.0; oc * x.h * x.w];
    for o in 0..oc {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = bv[o];
                for i in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y + ky, xx + kx);
                            if sy < pad || sx < pad || sy - pad >= x.h || sx - pad >= x.w {
                                continue;
                            }
                            s += wv[((o * x.c + i) * k + ky) * k + kx] * x.v[(i * x.h + sy - pad) * x.w + sx - pad];
                        }
                    }
                }
                v[(o * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Map { c: oc, h: x.h, w: x.w, v }
}

fn up_add(lateral: &Map, top: &Map) -> Map {
    let mut v = lateral.v.clone();
    for c in 0..lateral.c {
        for y in 0..lateral.h {
            for x in 0..lateral.w {
                v[(c * lateral.h + y) * lateral.w + x] += top.v[(c * top.h + y / 2) * top.w + x / 2];
            }
        }
    }
    Map { v, ..*lateral }
}

fn to_map(t: &Tensor) -> Map {
    let (_, c, h, w) = t.dims4().unwrap();
    Map { c, h, w, v: common::to_vec(t) }
}

#[test]
fn pyramid_matches_loop_reference() {
    let store = ParamStore::new(8, DType::F64);
    let cfg = FpnConfig {
        backbone: BackboneConfig {
            base_width: 4,
            blocks: [1, 1, 1, 1],
        },
        channels: 8,
        head: FpnHeadKind::Concat,
    };
    let backbone = ResNet::new(store.root().pp("backbone"), cfg.backbone).unwrap();
    let head = FpnHead::new(store.root().pp("fpn"), cfg, 5).unwrap();
    let x = common::rand_tensor(&[1, 3, 64, 64], 9, DType::F64);
    let stack = backbone.forward(&x, &Ctx::eval()).unwrap();
    let pyramid = head.pyramid(&stack).unwrap();

    let c: Vec<Map> = stack.levels().iter().map(|t| to_map(t)).collect();
    let lat = |k: usize| conv(&c[k], head.lateral(k).weight(), head.lateral(k).bias().unwrap(), 1);
    let smooth = |k: usize, m: &Map| conv(m, head.smoother(k).weight(), head.smoother(k).bias().unwrap(), 3);
    let mut merged = lat(3);
    let mut want = vec![smooth(3, &merged)];
    for k in (0..3).rev() {
        merged = up_add(&lat(k), &merged);
        want.push(smooth(k, &merged));
    }
    want.reverse();
    for (k, (got, want)) in pyramid.levels.iter().zip(&want).enumerate() {
        assert_eq!(got.dims(), [1, 8, want.h, want.w], "level {k}");
        let d = common::to_vec(got).iter().zip(&want.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-10, "level P{}: {d:e}", k + 2);
    }

    let pooled = head.pooled_features(&pyramid).unwrap();
    assert_eq!(pooled.dims(), [1, 32]);
    let p3 = common::to_vec(&pooled.i((.., 8..16)).unwrap());
    for ch in 0..8 {
        let plane = &want[1].v[ch * 64..(ch + 1) * 64];
        assert!((p3[ch] - plane.iter().sum::<f64>() / 64.0).abs() < 1e-12);
    }
}

#[test]
fn per_level_head_averages_logits() {
    let store = ParamStore::new(10, DType::F64);
    let cfg = FpnConfig {
        backbone: BackboneConfig {
            base_width: 4,
            blocks: [1, 1, 1, 1],
        },
        channels: 4,
        head: FpnHeadKind::PerLevelMean,
    };
    let backbone = ResNet::new(store.root().pp("backbone"), cfg.backbone).unwrap();
    let head = FpnHead::new(store.root().pp("fpn"), cfg, 3).unwrap();
    let x = common::rand_tensor(&[2, 3, 64, 64], 11, DType::F64);
    let stack = backbone.forward(&x, &Ctx::eval()).unwrap();
    let logits = head.classify(&stack, &Ctx::eval()).unwrap();
    let pyramid = head.pyramid(&stack).unwrap();
    let mut sum = Tensor::zeros((2, 3), DType::F64, &candle_core::Device::Cpu).unwrap();
    for (level, fc) in pyramid.levels.iter().zip(head.classifiers()) {
        let pooled = level.mean((2, 3)).unwrap();
        sum = (sum + fc.forward(&pooled).unwrap()).unwrap();
    }
    assert!(common::max_abs_diff(&logits, &(sum / 4.0).unwrap()) < 1e-12);
}

fn small_mmal(parts_at_test: bool) -> Model {
    let arch = ArchConfig {
        base_width: 4,
        blocks: [1, 1, 1, 1],
        appm_windows: vec![(1, 1)],
        appm_top_k: vec![2],
        part_size: 64,
        mmal_parts_at_test: parts_at_test,
        ..ArchConfig::default()
    };
    Model::build(ModelTag::Mmal, &arch, 4, 0.0, 12, DType::F32).unwrap()
}

#[test]
fn mmal_test_phase_skips_parts() {
    let model = small_mmal(false);
    let Network::Mmal(net) = &model.net else { panic!("not mmal") };
    let x = common::rand_tensor(&[2, 3, 64, 64], 13, DType::F32);
    let out = net.forward_branches(&x, &Ctx::eval(), net.config().parts_at_test).unwrap();
    assert!(out.part_logits.is_none() && out.parts.is_empty());
    let want = ((&out.raw_logits + &out.object_logits).unwrap() / 2.0).unwrap();
    let got = model.logits(&x, &Ctx::eval()).unwrap();
    assert!(common::max_abs_diff(&got, &want) < 1e-6);

    let with_parts = small_mmal(true);
    let Network::Mmal(net) = &with_parts.net else { panic!("not mmal") };
    let out = net.forward_branches(&x, &Ctx::eval(), true).unwrap();
    assert_eq!(out.part_logits.unwrap().dims(), [4, 4]);
    assert!(out.parts.iter().all(|p| p.len() == 2));
}

#[test]
fn mmal_training_loss_uses_parts() {
    let model = small_mmal(false);
    let x = common::rand_tensor(&[2, 3, 64, 64], 14, DType::F32);
    let (loss, logits) = model.loss(&x, &[0, 3], &Ctx::train(1)).unwrap();
    assert_eq!(logits.dims(), [2, 4]);
    // three cross-entropies near ln 4 each at initialization
    let l = loss.to_scalar::<f32>().unwrap() as f64;
    assert!(l > 1.5 * 4f64.ln() && l < 6.0 * 4f64.ln(), "loss {l}");
}

#[test]
fn full_image_crop_is_the_raw_image() {
    let x = common::rand_tensor(&[3, 48, 40], 15, DType::F32);
    let same = crop_resize(&x, &BoundingBox::full(48, 40), 48, 40).unwrap();
    assert_eq!(common::max_abs_diff(&same, &x), 0.0);
}

#[test]
fn mmal_uniform_image_falls_back_to_full_object() {
    let model = small_mmal(false);
    let Network::Mmal(net) = &model.net else { panic!("not mmal") };
    let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &candle_core::Device::Cpu).unwrap();
    let out = net.forward_branches(&x, &Ctx::eval(), false).unwrap();
    assert!(out.objects[0].fallback);
    assert_eq!(out.objects[0].bbox, BoundingBox::full(64, 64));
    // the object branch then sees the raw input
    assert!(common::max_abs_diff(&out.object_logits, &out.raw_logits) < 1e-6);
}

#[test]
fn full_size_mmal_predicts_without_parts() {
    let model = Model::build(ModelTag::Mmal, &ArchConfig::default(), 102, 0.0, 16, DType::F32).unwrap();
    let x = common::rand_tensor(&[1, 3, 448, 448], 17, DType::F32);
    let Network::Mmal(net) = &model.net else { panic!("not mmal") };
    let out = net.forward_branches(&x, &Ctx::eval(), false).unwrap();
    assert_eq!(out.raw_logits.dims(), [1, 102]);
    assert!(out.part_logits.is_none());
    let b = out.objects[0].bbox;
    assert!(b.is_valid_within(448, 448));
}

#[test]
fn every_tag_produces_class_probabilities() {
    let arch = ArchConfig {
        base_width: 4,
        blocks: [1, 1, 1, 1],
        ran_modules: [1, 1, 1],
        ran_trunk_depth: 1,
        fpn_channels: 8,
        appm_windows: vec![(1, 1)],
        appm_top_k: vec![1],
        part_size: 64,
        ..ArchConfig::default()
    };
    let x = common::rand_tensor(&[3, 3, 64, 64], 18, DType::F32);
    for tag in ModelTag::ALL {
        let model = Model::build(tag, &arch, 5, 0.3, 19, DType::F32).unwrap();
        let p = model.probabilities(&x).unwrap();
        assert_eq!(p.dims(), [3, 5], "{tag}");
        let rows: Vec<Vec<f32>> = p.to_vec2().unwrap();
        for row in rows {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "{tag}: row sum {s}");
        }
        // eval mode is deterministic despite dropout
        let again = model.probabilities(&x).unwrap();
        assert_eq!(common::max_abs_diff(&p, &again), 0.0, "{tag}");
    }
}
