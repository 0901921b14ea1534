use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// He normal with fan-out, as used for ReLU conv stacks.
    KaimingFanOut,
    Uniform { bound: f64 },
}

struct Entry {
    var: Var,
    trainable: bool,
}

/// Named parameter and buffer storage for one network.
///
/// Initialization draws from a single seeded stream in creation order, so a
/// network built twice with the same seed gets bit-identical weights.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: Mutex<BTreeMap<String, Entry>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            entries: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Tensor> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if let Some(existing) = entries.get(&name) {
            if existing.var.shape() != &shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    existing.var.shape(),
                    shape
                )));
            }
            return Ok(existing.var.as_tensor().clone());
        }
        let values = self.draw(&shape, init);
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        entries.insert(name, Entry { var, trainable });
        Ok(out)
    }

    fn draw(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("param rng poisoned");
        match init {
            Init::Const(v) => vec![v; n],
            Init::KaimingFanOut => {
                let dims = shape.dims();
                let fan_out = dims[0] * dims[2..].iter().product::<usize>();
                let std = (2.0 / fan_out.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| normal.sample(&mut *rng)).collect()
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        }
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Every parameter and buffer in name order, with its trainable flag.
    pub fn entries(&self) -> Vec<(String, Var, bool)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone(), e.trainable))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries.get(name).map(|e| e.var.clone())
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Writes all tensors plus string metadata as a safetensors file.
    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let entries = self.entries();
        let mut buffers = Vec::with_capacity(entries.len());
        for (name, var, _) in &entries {
            let t = var.as_tensor();
            let (dtype, bytes) = tensor_bytes(t)?;
            buffers.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| checkpoint_err(path, e))
            })
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(views, Some(metadata), path).map_err(|e| {
            Error::WriteFailure {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })
    }

    /// Overwrites stored values from a safetensors file. `rename` maps a file
    /// tensor name to a store name (`None` skips it). With `strict`, every
    /// store entry must be filled. Returns the number of tensors loaded and
    /// the file metadata.
    pub fn load(
        &self,
        path: &Path,
        strict: bool,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<(usize, HashMap<String, String>)> {
        let bytes = std::fs::read(path)?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| checkpoint_err(path, e))?;
        let metadata = meta.metadata().clone().unwrap_or_default();
        let file = SafeTensors::deserialize(&bytes).map_err(|e| checkpoint_err(path, e))?;
        let entries = self.entries.lock().expect("param store poisoned");
        let mut loaded = 0;
        let mut seen = std::collections::BTreeSet::new();
        for (file_name, view) in file.tensors() {
            let Some(name) = rename(&file_name) else { continue };
            let Some(entry) = entries.get(&name) else { continue };
            if entry.var.dims() != view.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: stored {:?}, file {:?}",
                    entry.var.dims(),
                    view.shape()
                )));
            }
            let t = view_to_tensor(&view, &self.device)
                .map_err(|e| checkpoint_err(path, e))?
                .to_dtype(self.dtype)?;
            entry.var.set(&t)?;
            seen.insert(name);
            loaded += 1;
        }
        if strict {
            if let Some(missing) = entries.keys().find(|k| !seen.contains(*k)) {
                return Err(checkpoint_err(path, format!("missing tensor {missing}")));
            }
        }
        Ok((loaded, metadata))
    }
}

fn checkpoint_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn view_to_tensor(view: &TensorView<'_>, device: &Device) -> std::result::Result<Tensor, String> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)
        }
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)
        }
        other => return Err(format!("unsupported tensor dtype {other:?}")),
    };
    t.map_err(|e| e.to_string())
}

/// A prefixed view into a [`ParamStore`], used while building layers.
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.store.create(self.full(name), shape.into(), init, true)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        self.store.create(self.full(name), shape.into(), init, false)
    }

    /// The variable behind a buffer, for in-place running statistic updates.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.store.get(&self.full(name))
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        let ta = a.root().pp("x").param("w", (4, 3, 3, 3), Init::KaimingFanOut).unwrap();
        let tb = b.root().pp("x").param("w", (4, 3, 3, 3), Init::KaimingFanOut).unwrap();
        let va = ta.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = tb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let a = ParamStore::new(1, DType::F32);
        a.root().param("w", (2, 5), Init::Uniform { bound: 1.0 }).unwrap();
        a.root().buffer("rm", 5, Init::Const(0.5)).unwrap();
        let meta = HashMap::from([("k".to_string(), "v".to_string())]);
        a.save(&path, meta).unwrap();

        let b = ParamStore::new(2, DType::F32);
        b.root().param("w", (2, 5), Init::Uniform { bound: 1.0 }).unwrap();
        b.root().buffer("rm", 5, Init::Const(0.0)).unwrap();
        let (n, meta) = b.load(&path, true, |s| Some(s.to_string())).unwrap();
        assert_eq!(n, 2);
        assert_eq!(meta["k"], "v");
        for name in ["w", "rm"] {
            let x = a.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b.get(name).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
    }
}
