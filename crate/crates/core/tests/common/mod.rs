#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use pestvision::data_io::{make_random_split, scan_label_space, scan_records, LabelSpace, SplitManifest, SplitRatios};
use pestvision::model::ModelTag;
use pestvision::preprocess::PreprocessSpec;
use pestvision::trainer::{OptimizerConfig, ScheduleConfig, TrainRunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Norm-wise relative error between an analytic gradient and central
/// differences of `loss` over up to `max_entries` entries of `var`.
pub fn gradient_error(var: &Var, analytic: &Tensor, max_entries: usize, eps: f64, loss: impl Fn() -> f64) -> f64 {
    let base = to_vec(var.as_tensor());
    let analytic = to_vec(analytic);
    let shape = var.as_tensor().dims().to_vec();
    let dtype = var.as_tensor().dtype();
    let step = (base.len() / max_entries).max(1);
    let set = |values: &[f64]| {
        let t = Tensor::from_vec(values.to_vec(), shape.as_slice(), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        var.set(&t).unwrap();
    };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for i in (0..base.len()).step_by(step) {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        set(&v);
        let up = loss();
        v[i] = base[i] - eps;
        set(&v);
        let down = loss();
        let numeric = (up - down) / (2.0 * eps);
        diff2 += (numeric - analytic[i]).powi(2);
        a2 += analytic[i].powi(2);
        n2 += numeric.powi(2);
    }
    set(&base);
    diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12)
}

pub struct DeskData {
    pub root: PathBuf,
    pub labels: LabelSpace,
    pub splits: [SplitManifest; 3],
}

/// Synthetic shapes set: `classes × per_class` images of `size` pixels,
/// split 7:1:2.
pub fn desk_data(dir: &Path, classes: usize, per_class: usize, size: u32) -> DeskData {
    let root = dir.join("data");
    pestvision::synth::write_shapes_dataset(&root, classes, per_class, size, 7).unwrap();
    let labels = scan_label_space(&root).unwrap();
    let records = scan_records(&root, &labels).unwrap();
    let splits = make_random_split(&records, SplitRatios::default(), 0).unwrap();
    DeskData { root, labels, splits }
}

/// Reduced-width configuration for 64-pixel crops trained from scratch.
pub fn desk_config(tag: ModelTag, max_epochs: usize) -> TrainRunConfig {
    let mut cfg = TrainRunConfig::defaults(tag);
    cfg.optimizer = OptimizerConfig::adam(1e-3, 0.0);
    cfg.schedule = ScheduleConfig::exponential(0.96);
    cfg.batch_size = 16;
    cfg.max_epochs = max_epochs;
    cfg.patience = max_epochs;
    cfg.drop_rate = 0.0;
    cfg.preprocess = PreprocessSpec::imagenet(72, 64);
    cfg.arch.base_width = 8;
    cfg.arch.fpn_channels = 32;
    cfg.arch.part_size = 64;
    // a 64-pixel crop leaves a 2×2 C5 map
    cfg.arch.appm_windows = vec![(1, 1)];
    cfg.arch.appm_top_k = vec![2];
    cfg
}
