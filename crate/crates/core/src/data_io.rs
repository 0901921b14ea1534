//! Folder-per-class datasets, split manifests and batch streaming.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{ChwImage, Mode, PreprocessSpec};

/// Label-space file written next to split manifests.
pub const LABELS_FILE: &str = "labels.txt";

pub const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Class names in lexicographic folder order; index = label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", names.len())));
        }
        let unique: HashSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("duplicate class names".into()));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// One class name per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::WriteFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::UnreadableRoot {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

/// One class per subdirectory of `root`.
pub fn scan_label_space(root: &Path) -> Result<LabelSpace> {
    let names: Vec<String> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    if names.len() < 2 {
        return Err(Error::EmptyDataset {
            root: root.to_path_buf(),
            found: names.len(),
        });
    }
    LabelSpace::new(names)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub label: usize,
}

/// Every image file under `root/<class>/`, classes in label order and files
/// sorted by name.
pub fn scan_records(root: &Path, labels: &LabelSpace) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    for (label, name) in labels.names().iter().enumerate() {
        for path in read_dir_sorted(&root.join(name))? {
            if path.is_file() && is_image(&path) {
                let rel = path.strip_prefix(root).expect("listed under root").to_path_buf();
                records.push(ImageRecord { path: rel, label });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.txt", self.as_str())
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub split_name: SplitName,
    pub records: Vec<ImageRecord>,
}

impl SplitManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Lines `path label`, one per record.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&format!("{} {}\n", r.path.to_string_lossy(), r.label));
        }
        write_text(path, &text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        let parts = [train, val, test];
        if parts.iter().any(|v| !(*v > 0.0 && *v < 1.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRatios(format!("{train},{val},{test}")));
        }
        Ok(r)
    }

    /// Parses `"0.7,0.1,0.2"`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidRatios(text.to_string()))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::InvalidRatios(text.to_string())),
        }
    }

    /// Per-class (train, val, test) counts; the rounding remainder goes to
    /// train.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let part = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
        let (val, test) = (part(self.val), part(self.test));
        (n.saturating_sub(val + test), val, test)
    }
}

/// Stratified random split. Each class is shuffled with one seeded stream
/// (classes in label order) and cut into val, test, then train.
pub fn make_random_split(
    records: &[ImageRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<[SplitManifest; 3]> {
    let mut by_class: BTreeMap<usize, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.label).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitName::ALL.map(|split_name| SplitManifest {
        split_name,
        records: Vec::new(),
    });
    for (class, mut members) in by_class {
        let (n_train, n_val, n_test) = ratios.counts(members.len());
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let (val, rest) = members.split_at(n_val);
        let (test, train) = rest.split_at(n_test);
        out[0].records.extend(train.iter().map(|r| (*r).clone()));
        out[1].records.extend(val.iter().map(|r| (*r).clone()));
        out[2].records.extend(test.iter().map(|r| (*r).clone()));
    }
    Ok(out)
}

/// Reads a `path label` list; blank lines are ignored.
pub fn load_fixed_split(path: &Path, labels: &LabelSpace, split_name: SplitName) -> Result<SplitManifest> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let malformed = || Error::MalformedLine {
            line: line_no,
            content: line.to_string(),
        };
        let (p, l) = trimmed.rsplit_once(' ').ok_or_else(malformed)?;
        let label: usize = l.parse().map_err(|_| malformed())?;
        if p.is_empty() {
            return Err(malformed());
        }
        if label >= labels.count() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: labels.count(),
                line: Some(line_no),
            });
        }
        records.push(ImageRecord {
            path: PathBuf::from(p),
            label,
        });
    }
    Ok(SplitManifest { split_name, records })
}

/// A batch of normalized images (B, 3, crop, crop) with labels.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Manifest indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Sample order of one epoch: manifest order in eval mode, a seeded shuffle
/// in train mode.
pub fn epoch_order(len: usize, mode: Mode, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if mode == Mode::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, epoch])));
    }
    order
}

/// Decodes and preprocesses manifest records batch by batch. Images of one
/// batch are decoded in parallel; the output order does not depend on the
/// number of workers. Undecodable files are logged and skipped.
pub struct BatchStream<'a> {
    root: PathBuf,
    manifest: &'a SplitManifest,
    prep: PreprocessSpec,
    mode: Mode,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    device: Device,
}

pub fn stream_batches<'a>(
    root: &Path,
    manifest: &'a SplitManifest,
    prep: PreprocessSpec,
    batch_size: usize,
    mode: Mode,
    seed: u64,
    epoch: u64,
) -> Result<BatchStream<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    prep.validate()?;
    Ok(BatchStream {
        root: root.to_path_buf(),
        manifest,
        prep,
        mode,
        seed,
        epoch,
        order: epoch_order(manifest.len(), mode, seed, epoch),
        batch_size,
        cursor: 0,
        device: Device::Cpu,
    })
}

impl BatchStream<'_> {
    fn load(&self, index: usize) -> Result<ChwImage> {
        let record = &self.manifest.records[index];
        let path = self.root.join(&record.path);
        let img = image::open(&path)
            .map_err(|e| Error::DecodeFailure {
                path: path.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, self.epoch, index as u64]));
        self.prep.apply(&img, self.mode, &mut rng)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.cursor >= self.order.len() {
                return None;
            }
            let end = (self.cursor + self.batch_size).min(self.order.len());
            let chunk = self.order[self.cursor..end].to_vec();
            self.cursor = end;
            let loaded: Vec<(usize, Result<ChwImage>)> = chunk.par_iter().map(|&i| (i, self.load(i))).collect();
            let crop = self.prep.crop as usize;
            let mut data = Vec::with_capacity(chunk.len() * 3 * crop * crop);
            let (mut labels, mut indices) = (Vec::new(), Vec::new());
            for (i, res) in loaded {
                match res {
                    Ok(img) => {
                        data.extend_from_slice(&img.data);
                        labels.push(self.manifest.records[i].label);
                        indices.push(i);
                    }
                    Err(e @ Error::DecodeFailure { .. }) => log::warn!("skipping record: {e}"),
                    Err(e) => return Some(Err(e)),
                }
            }
            if labels.is_empty() {
                continue;
            }
            let images = Tensor::from_vec(data, (labels.len(), 3, crop, crop), &self.device);
            return Some(images.map_err(Error::from).map(|images| Batch {
                images,
                labels,
                indices,
            }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(counts: &[usize]) -> Vec<ImageRecord> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| {
                (0..n).map(move |i| ImageRecord {
                    path: PathBuf::from(format!("c{label}/{i}.png")),
                    label,
                })
            })
            .collect()
    }

    #[test]
    fn ten_records_split_seven_one_two() {
        let [tr, va, te] = make_random_split(&records(&[10]), SplitRatios::default(), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn remainder_goes_to_train() {
        assert_eq!(SplitRatios::default().counts(13), (10, 1, 2));
        assert_eq!(SplitRatios::default().counts(4508), (3157, 450, 901));
    }

    #[test]
    fn tiny_class_is_rejected() {
        let err = make_random_split(&records(&[10, 3]), SplitRatios::default(), 0).unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { class: 1, count: 3 }));
    }

    #[test]
    fn seeds_change_membership_not_sizes() {
        let recs = records(&[40, 25, 31]);
        let a = make_random_split(&recs, SplitRatios::default(), 1).unwrap();
        let b = make_random_split(&recs, SplitRatios::default(), 2).unwrap();
        let again = make_random_split(&recs, SplitRatios::default(), 1).unwrap();
        assert_eq!(a, again);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.len(), y.len());
        }
        assert_ne!(a[0].records, b[0].records);
    }

    #[test]
    fn ratio_validation() {
        assert!(SplitRatios::parse("0.7,0.1,0.2").is_ok());
        assert!(SplitRatios::parse("0.7,0.2,0.2").is_err());
        assert!(SplitRatios::parse("1,0,0").is_err());
        assert!(SplitRatios::parse("0.5,0.5").is_err());
        assert!(SplitRatios::parse("a,b,c").is_err());
    }

    #[test]
    fn fixed_split_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelSpace::new((0..102).map(|i| format!("class{i:03}")).collect()).unwrap();
        let path = dir.path().join("list.txt");

        fs::write(&path, "").unwrap();
        assert!(load_fixed_split(&path, &labels, SplitName::Train).unwrap().is_empty());

        fs::write(&path, "a b/img one.jpg 3\nimg2.jpg 101\n").unwrap();
        let m = load_fixed_split(&path, &labels, SplitName::Train).unwrap();
        assert_eq!(m.records[0].path, PathBuf::from("a b/img one.jpg"));
        assert_eq!(m.labels(), vec![3, 101]);

        fs::write(&path, "ok.jpg 1\nimg.jpg 999\n").unwrap();
        assert!(matches!(
            load_fixed_split(&path, &labels, SplitName::Test),
            Err(Error::LabelOutOfRange { label: 999, classes: 102, line: Some(2) })
        ));

        fs::write(&path, "ok.jpg 1\nnolabel\n").unwrap();
        assert!(matches!(
            load_fixed_split(&path, &labels, SplitName::Test),
            Err(Error::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn label_space_from_folders() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["bees", "ants"] {
            fs::create_dir(dir.path().join(name)).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let ls = scan_label_space(dir.path()).unwrap();
        assert_eq!(ls.names(), &["ants".to_string(), "bees".to_string()]);
        assert_eq!(ls.count(), 2);

        let single = tempfile::tempdir().unwrap();
        fs::create_dir(single.path().join("only")).unwrap();
        assert!(matches!(
            scan_label_space(single.path()),
            Err(Error::EmptyDataset { found: 1, .. })
        ));
    }

    #[test]
    fn epoch_order_is_seeded() {
        assert_eq!(epoch_order(5, Mode::Eval, 1, 0), vec![0, 1, 2, 3, 4]);
        let a = epoch_order(50, Mode::Train, 7, 3);
        assert_eq!(a, epoch_order(50, Mode::Train, 7, 3));
        assert_ne!(a, epoch_order(50, Mode::Train, 7, 4));
    }
}
